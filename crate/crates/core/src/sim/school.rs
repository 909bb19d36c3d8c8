//! Synthetic school friendship network: directed nominations within schools,
//! biased toward classmates of the same grade.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Bernoulli, Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::dgp::SimNetwork;
use crate::community::{CommunityAssignment, CommunitySource};
use crate::data::UnitTable;
use crate::error::{Error, Result};
use crate::graph::{EdgeMode, Network};
use crate::rng::rng_from_seed;

pub const GRADES: std::ops::RangeInclusive<u32> = 7..=12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchoolConfig {
    pub n: usize,
    pub schools: usize,
    pub seed: u64,
    pub p_sex: f64,
    pub p_race: f64,
    /// Out-degree ~ BetaBinomial(max_nominations, alpha, beta).
    pub max_nominations: u64,
    pub degree_alpha: f64,
    pub degree_beta: f64,
    /// Probability that a nomination goes to the same school and grade, and
    /// to the same school; the remainder goes anywhere.
    pub p_same_grade: f64,
    pub p_same_school: f64,
}

impl SchoolConfig {
    /// Marginals set to sex 0.49, race 0.71, out-degree mean 5.07 and SD 2.92.
    pub fn new(n: usize, seed: u64) -> Self {
        SchoolConfig {
            n,
            schools: 8,
            seed,
            p_sex: 0.49,
            p_race: 0.71,
            max_nominations: 10,
            degree_alpha: 1.386,
            degree_beta: 1.347,
            p_same_grade: 0.6,
            p_same_school: 0.3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.schools == 0 || self.n < self.schools {
            return Err(Error::validation(format!("{} students cannot fill {} schools", self.n, self.schools)));
        }
        for p in [self.p_sex, self.p_race, self.p_same_grade, self.p_same_school] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.p_same_grade + self.p_same_school > 1.0 {
            return Err(Error::validation("nomination probabilities exceed 1"));
        }
        if !(self.degree_alpha > 0.0 && self.degree_beta > 0.0) {
            return Err(Error::validation("degree shape parameters must be positive"));
        }
        Ok(())
    }
}

/// Covariates `sex, race, grade`; communities are school-by-grade groups,
/// labeled `school * 6 + (grade - 7)` before compaction.
pub fn surrogate_school_network(cfg: &SchoolConfig) -> Result<SimNetwork> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = rng_from_seed(cfg.seed);
    let sex = Bernoulli::new(cfg.p_sex).expect("validated");
    let race = Bernoulli::new(cfg.p_race).expect("validated");
    let school: Vec<usize> = (0..n).map(|i| i * cfg.schools / n).collect();
    let mut x = DMatrix::zeros(n, 3);
    let mut grade = vec![0u32; n];
    for i in 0..n {
        x[(i, 0)] = f64::from(u8::from(sex.sample(&mut rng)));
        x[(i, 1)] = f64::from(u8::from(race.sample(&mut rng)));
        grade[i] = rng.random_range(GRADES);
        x[(i, 2)] = f64::from(grade[i]);
    }
    let n_grades = GRADES.count();
    let group = |i: usize| school[i] * n_grades + (grade[i] - GRADES.start()) as usize;
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); cfg.schools * n_grades];
    let mut by_school: Vec<Vec<usize>> = vec![Vec::new(); cfg.schools];
    for i in 0..n {
        by_group[group(i)].push(i);
        by_school[school[i]].push(i);
    }
    let all: Vec<usize> = (0..n).collect();

    let beta = Beta::new(cfg.degree_alpha, cfg.degree_beta).expect("validated");
    let mut edges = Vec::new();
    for i in 0..n {
        let p = beta.sample(&mut rng);
        let d = Binomial::new(cfg.max_nominations, p).expect("p in [0, 1]").sample(&mut rng) as usize;
        let d = d.min(n - 1);
        let mut chosen: Vec<usize> = Vec::with_capacity(d);
        let mut attempts = 0;
        while chosen.len() < d {
            attempts += 1;
            let u: f64 = rng.random();
            let pool = if attempts > 50 * d.max(1) {
                &all
            } else if u < cfg.p_same_grade {
                &by_group[group(i)]
            } else if u < cfg.p_same_grade + cfg.p_same_school {
                &by_school[school[i]]
            } else {
                &all
            };
            let j = pool[rng.random_range(0..pool.len())];
            if j != i && !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        edges.extend(chosen.into_iter().map(|j| (i, j, 1.0)));
    }
    let network = Network::from_edges(n, EdgeMode::Directed, edges)?;
    let labels: Vec<usize> = (0..n).map(group).collect();
    let communities = CommunityAssignment::from_labels(&labels, CommunitySource::Known)?;
    let units = UnitTable::new(vec!["sex".into(), "race".into(), "grade".into()], x)?;
    Ok(SimNetwork {
        network: network.with_communities(communities.labels().to_vec())?,
        units,
        communities,
    })
}
