use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::records::{Engine, EnergyUnit, RunRecord, TimeUnit};
use crate::error::{Error, Result};
use crate::model::Topology;

/// Optional keys that further split the default `(L, tau_Q)` grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Gamma,
    Topology,
    Engine,
    ChainId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub extra_keys: Vec<GroupField>,
    /// Average repeated reads of one chain realization before taking the
    /// spread across realizations.
    pub collapse_reads: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        AggregateOptions { extra_keys: Vec::new(), collapse_reads: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub l: usize,
    pub tau_q: f64,
    pub tau_q_unit: TimeUnit,
    pub gamma: Option<f64>,
    pub topology: Option<Topology>,
    pub engine: Option<Engine>,
    pub chain_id: Option<String>,
    pub mean_kinks: f64,
    /// Standard error of the mean; absent for single samples.
    pub sem: Option<f64>,
    pub n: usize,
    /// Every contributing record came from an external device.
    pub external: bool,
}

/// Order-independent sum.
fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Mean and standard error of the mean (absent for `n = 1`).
pub fn mean_sem(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mut v = values.to_vec();
    let mean = stable_sum(&mut v) / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let mut sq: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = stable_sum(&mut sq) / (n - 1) as f64;
    (mean, Some((var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    l: usize,
    tau_bits: OrdF64,
    gamma: Option<OrdF64>,
    topology: Option<Topology>,
    engine: Option<Engine>,
    chain_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct Member<'a> {
    rec: &'a RunRecord,
    kinks: f64,
}

/// Group records by `(L, tau_Q)` plus `opts.extra_keys` and reduce each
/// group to its mean kink number and standard error.
pub fn aggregate(records: &[RunRecord], opts: &AggregateOptions) -> Result<Vec<AggregateRow>> {
    let has = |f: GroupField| opts.extra_keys.contains(&f);
    let mut groups: BTreeMap<Key, Vec<Member>> = BTreeMap::new();
    for rec in records {
        let kinks = rec.kinks()?;
        let key = Key {
            l: rec.l,
            tau_bits: OrdF64(rec.tau_q),
            gamma: has(GroupField::Gamma).then_some(OrdF64(rec.gamma)),
            topology: has(GroupField::Topology).then_some(rec.topology),
            engine: has(GroupField::Engine).then_some(rec.engine),
            chain_id: has(GroupField::ChainId).then(|| rec.chain_id.clone()),
        };
        groups.entry(key).or_default().push(Member { rec, kinks });
    }

    let mut rows = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let first = members[0].rec;
        let units: (TimeUnit, EnergyUnit) = (first.tau_q_unit, first.energy_unit);
        if members.iter().any(|m| (m.rec.tau_q_unit, m.rec.energy_unit) != units) {
            return Err(Error::Validation(format!(
                "group L = {}, tau_Q = {} mixes time or energy units",
                key.l, key.tau_bits.0
            )));
        }
        let samples: Vec<f64> = if opts.collapse_reads {
            let mut per_real: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
            for m in &members {
                per_real
                    .entry((m.rec.chain_id.as_str(), m.rec.realization_id.as_str()))
                    .or_default()
                    .push(m.kinks);
            }
            per_real.into_values().map(|v| mean_sem(&v).0).collect()
        } else {
            members.iter().map(|m| m.kinks).collect()
        };
        let (mean_kinks, sem) = mean_sem(&samples);
        rows.push(AggregateRow {
            l: key.l,
            tau_q: key.tau_bits.0,
            tau_q_unit: units.0,
            gamma: key.gamma.map(|g| g.0),
            topology: key.topology,
            engine: key.engine,
            chain_id: key.chain_id,
            mean_kinks,
            sem,
            n: samples.len(),
            external: members.iter().all(|m| m.rec.engine == Engine::External),
        });
    }
    Ok(rows)
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["L", "tau_Q", "mean_kinks", "sem", "n"])?;
    for r in rows {
        w.write_record([
            r.l.to_string(),
            r.tau_q.to_string(),
            r.mean_kinks.to_string(),
            r.sem.map_or(String::new(), |s| s.to_string()),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::records::kinks_to_energy;

    fn rec(tau: f64, kinks: f64, realization: &str) -> RunRecord {
        RunRecord {
            chain_id: "c".into(),
            engine: Engine::Oracle,
            l: 5,
            topology: Topology::Periodic,
            n_couplings: 5,
            j_max: 1.0,
            tau_q: tau,
            tau_q_unit: TimeUnit::HbarOverJ,
            final_energy: kinks_to_energy(kinks, 5, 1.0),
            energy_unit: EnergyUnit::J,
            gamma: 0.0,
            seed: 0,
            realization_id: realization.into(),
        }
    }

    #[test]
    fn mean_and_sem_examples() {
        assert_eq!(mean_sem(&[2.0, 2.0, 2.0]), (2.0, Some(0.0)));
        let (m, s) = mean_sem(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mean_sem(&[4.0]), (4.0, None));
    }

    #[test]
    fn groups_by_l_and_tau() {
        let recs = vec![rec(1.0, 1.0, "a"), rec(1.0, 3.0, "b"), rec(2.0, 0.5, "a")];
        let rows = aggregate(&recs, &AggregateOptions::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean_kinks - 2.0).abs() < 1e-12);
        assert_eq!(rows[0].n, 2);
        assert_eq!(rows[1].sem, None);
    }

    #[test]
    fn reads_collapse_per_realization() {
        let recs = vec![rec(1.0, 1.0, "a"), rec(1.0, 2.0, "a"), rec(1.0, 3.0, "b")];
        let rows = aggregate(&recs, &AggregateOptions::default()).unwrap();
        assert_eq!(rows[0].n, 2);
        assert!((rows[0].mean_kinks - 2.25).abs() < 1e-12);
        let flat = AggregateOptions { collapse_reads: false, ..Default::default() };
        assert_eq!(aggregate(&recs, &flat).unwrap()[0].n, 3);
    }

    #[test]
    fn mixed_units_are_rejected() {
        let mut b = rec(1.0, 1.0, "b");
        b.tau_q_unit = TimeUnit::Microseconds;
        assert!(aggregate(&[rec(1.0, 1.0, "a"), b], &AggregateOptions::default()).is_err());
    }

    #[test]
    fn missing_sem_is_written_empty() {
        let rows = aggregate(&[rec(1.0, 1.0, "a")], &AggregateOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_aggregate(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "L,tau_Q,mean_kinks,sem,n\n5,1,1,,1\n");
    }
}
