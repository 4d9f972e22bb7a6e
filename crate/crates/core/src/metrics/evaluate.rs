//! Stochastic evaluation protocol and report export.

use serde::{Deserialize, Serialize};

use super::ops::{distance_block, dtw_lip, fdd, lip_correlation, lve, DiversityAccumulator};
use crate::corpus::{Corpus, Lineage, SequenceRecord, Split};
use crate::diffusion::{make_linear_schedule, sample, DenoiserModel, NoiseSchedule, SampleConfig};
use crate::error::{invalid, Result};
use crate::face::{decode_sequence, ExpressionSequence, MeshSequence};
use crate::seed;

pub const METRIC_NAMES: [&str; 10] = [
    "lve", "dtw", "l_pcc", "l_ccc", "fdd_u", "fdd_l", "s_div_u", "s_div_l", "t_div_u", "t_div_l",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lve: f64,
    pub dtw: f64,
    pub l_pcc: f64,
    pub l_ccc: f64,
    pub fdd_u: f64,
    pub fdd_l: f64,
    pub s_div_u: f64,
    pub s_div_l: f64,
    pub t_div_u: f64,
    pub t_div_l: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 10] {
        [
            self.lve, self.dtw, self.l_pcc, self.l_ccc, self.fdd_u, self.fdd_l, self.s_div_u, self.s_div_l,
            self.t_div_u, self.t_div_l,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> Self {
        Self {
            lve: v[0],
            dtw: v[1],
            l_pcc: v[2],
            l_ccc: v[3],
            fdd_u: v[4],
            fdd_l: v[5],
            s_div_u: v[6],
            s_div_l: v[7],
            t_div_u: v[8],
            t_div_l: v[9],
        }
    }

    /// Field-wise `self - other`.
    pub fn delta(&self, other: &MetricReport) -> MetricReport {
        let (a, b) = (self.values(), other.values());
        Self::from_values(std::array::from_fn(|i| a[i] - b[i]))
    }

    pub fn csv_header() -> String {
        METRIC_NAMES.join(",")
    }

    /// Values with Rust's shortest round-trip float formatting.
    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
    }
}

/// Human-readable table, one row per labelled report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<label_w$}", "model");
    for n in METRIC_NAMES {
        out.push_str(&format!("  {n:>9}"));
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for v in r.values() {
            out.push_str(&format!("  {v:>9.5}"));
        }
        out.push('\n');
    }
    out
}

/// Anything that turns a test sequence's audio into an expression sequence.
pub trait Sampler {
    fn sample(&self, rec: &SequenceRecord, seed: u64) -> Result<ExpressionSequence>;

    /// Corpus the sampler was trained on, if it records one.
    fn lineage(&self) -> Option<&Lineage> {
        None
    }
}

/// The trained denoiser driven by a sequence's mel through its own encoder.
pub struct DiffusionSampler<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: NoiseSchedule,
    pub guidance: f64,
}

impl<'a> DiffusionSampler<'a> {
    pub fn new(model: &'a DenoiserModel, guidance: f64) -> Result<Self> {
        Ok(Self {
            model,
            schedule: make_linear_schedule(model.config.steps)?,
            guidance,
        })
    }
}

impl Sampler for DiffusionSampler<'_> {
    fn sample(&self, rec: &SequenceRecord, seed_value: u64) -> Result<ExpressionSequence> {
        let audio = self.model.encode(&rec.mel.frames)?;
        let cfg = SampleConfig {
            guidance: self.guidance,
            seed: seed_value,
        };
        sample(self.model, &audio, &self.schedule, &cfg)
    }

    fn lineage(&self) -> Option<&Lineage> {
        self.model.lineage.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Samples per test sequence.
    pub samples: usize,
    pub seed: u64,
    /// Evaluate only the first this-many sequences of the split.
    pub max_sequences: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 32,
            seed: 0,
            max_sequences: None,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(invalid!("eval.samples must be at least 2, got {}", self.samples));
        }
        if self.max_sequences == Some(0) {
            return Err(invalid!("eval.max_sequences must be positive"));
        }
        Ok(())
    }
}

/// Seed of sample `s` of sequence `n`.
pub fn sample_seed(base: u64, sequence: usize, s: usize) -> u64 {
    seed::derive_seed(seed::derive_seed(base, sequence as u64), s as u64)
}

/// Per-sequence metrics averaged over the samples of that sequence.
fn sequence_metrics(samples: &[MeshSequence], gt: &MeshSequence, corpus: &Corpus) -> Result<[f64; 6]> {
    let tpl = &corpus.template;
    let mut acc = [0.0; 6];
    for p in samples {
        let (pcc, ccc) = lip_correlation(p, gt, &tpl.mouth_idx)?;
        let v = [
            lve(p, gt, &tpl.lip_idx)?,
            dtw_lip(p, gt, tpl)?,
            pcc,
            ccc,
            fdd(p, gt, &tpl.upper_idx)?,
            fdd(p, gt, &tpl.mouth_idx)?,
        ];
        for k in 0..6 {
            acc[k] += v[k];
        }
    }
    Ok(acc.map(|v| v / samples.len() as f64))
}

/// Draws `samples` outputs per sequence of `split`, decodes them and computes
/// every metric; diversity comes from the assembled distance tensor.
pub fn evaluate_model(sampler: &dyn Sampler, corpus: &Corpus, split: Split, opts: &EvalOptions) -> Result<MetricReport> {
    opts.validate()?;
    if let Some(l) = sampler.lineage() {
        corpus.lineage().check(l, "denoiser checkpoint")?;
    }
    let mut indices = corpus.indices(split);
    if let Some(k) = opts.max_sequences {
        indices.truncate(k);
    }
    if indices.is_empty() {
        return Err(invalid!("split {} has no sequences", split.name()));
    }
    let tpl = &corpus.template;
    let mut sums = [0.0; 6];
    let mut div = DiversityAccumulator::default();
    for (n, &idx) in indices.iter().enumerate() {
        let rec = &corpus.records[idx];
        let gt = decode_sequence(tpl, &rec.expressions)?;
        let what = || format!("test sequence {idx}");
        let meshes: Vec<MeshSequence> = (0..opts.samples)
            .map(|s| {
                let x = sampler
                    .sample(rec, sample_seed(opts.seed, n, s))
                    .map_err(|e| e.context(what()))?;
                if x.len() != gt.frames() {
                    return Err(invalid!(
                        "sampler returned {} frames for a {}-frame sequence",
                        x.len(),
                        gt.frames()
                    )
                    .context(what()));
                }
                decode_sequence(tpl, &x)
            })
            .collect::<Result<_>>()?;
        let m = sequence_metrics(&meshes, &gt, corpus).map_err(|e| e.context(what()))?;
        for k in 0..6 {
            sums[k] += m[k];
        }
        div.add(&distance_block(&meshes, &gt)?, &tpl.upper_idx, &tpl.mouth_idx)
            .map_err(|e| e.context(what()))?;
    }
    let n = indices.len() as f64;
    let (s_div_u, s_div_l, t_div_u, t_div_l) = div.finish()?;
    Ok(MetricReport {
        lve: sums[0] / n,
        dtw: sums[1] / n,
        l_pcc: sums[2] / n,
        l_ccc: sums[3] / n,
        fdd_u: sums[4] / n,
        fdd_l: sums[5] / n,
        s_div_u,
        s_div_l,
        t_div_u,
        t_div_l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::error::Error;
    use crate::metrics::ops::{diversity, DistanceTensor};
    use lipcycle_grad::Mat;

    fn small_corpus() -> Corpus {
        let cfg = CorpusConfig {
            train_sequences: 16,
            val_sequences: 4,
            test_sequences: 3,
            ..Default::default()
        };
        generate_corpus(&cfg).unwrap()
    }

    struct Oracle;
    impl Sampler for Oracle {
        fn sample(&self, rec: &SequenceRecord, _: u64) -> Result<ExpressionSequence> {
            Ok(rec.expressions.clone())
        }
    }

    /// Ground truth plus seeded noise on every channel.
    struct Noisy(f64);
    impl Sampler for Noisy {
        fn sample(&self, rec: &SequenceRecord, s: u64) -> Result<ExpressionSequence> {
            let mut r = seed::rng(s);
            let f = &rec.expressions.frames;
            ExpressionSequence::new(f + &(seed::standard_normal(&mut r, f.nrows(), f.ncols()) * self.0))
        }
    }

    #[test]
    fn ground_truth_sampler_scores_perfectly() {
        let c = small_corpus();
        let opts = EvalOptions {
            samples: 2,
            ..Default::default()
        };
        let r = evaluate_model(&Oracle, &c, Split::Test, &opts).unwrap();
        assert_eq!(r.lve, 0.0);
        assert_eq!(r.dtw, 0.0);
        assert!((r.l_pcc - 1.0).abs() < 1e-12 && (r.l_ccc - 1.0).abs() < 1e-12);
        assert_eq!((r.s_div_u, r.s_div_l, r.fdd_u, r.fdd_l), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn micro_run_matches_composed_ops() {
        let c = small_corpus();
        let opts = EvalOptions {
            samples: 2,
            seed: 5,
            max_sequences: Some(1),
        };
        let sampler = Noisy(0.05);
        let r = evaluate_model(&sampler, &c, Split::Test, &opts).unwrap();

        let tpl = &c.template;
        let rec = &c.records[c.indices(Split::Test)[0]];
        let gt = decode_sequence(tpl, &rec.expressions).unwrap();
        let preds: Vec<MeshSequence> = (0..2)
            .map(|s| decode_sequence(tpl, &sampler.sample(rec, sample_seed(5, 0, s)).unwrap()).unwrap())
            .collect();
        let avg = |f: &dyn Fn(&MeshSequence) -> f64| (f(&preds[0]) + f(&preds[1])) / 2.0;
        assert_eq!(r.lve, avg(&|p| lve(p, &gt, &tpl.lip_idx).unwrap()));
        assert_eq!(r.dtw, avg(&|p| dtw_lip(p, &gt, tpl).unwrap()));
        assert_eq!(r.l_pcc, avg(&|p| lip_correlation(p, &gt, &tpl.mouth_idx).unwrap().0));
        assert_eq!(r.l_ccc, avg(&|p| lip_correlation(p, &gt, &tpl.mouth_idx).unwrap().1));
        assert_eq!(r.fdd_u, avg(&|p| fdd(p, &gt, &tpl.upper_idx).unwrap()));
        assert_eq!(r.fdd_l, avg(&|p| fdd(p, &gt, &tpl.mouth_idx).unwrap()));
        let t = DistanceTensor {
            seqs: vec![distance_block(&preds, &gt).unwrap()],
        };
        let d = diversity(&t, &tpl.upper_idx, &tpl.mouth_idx).unwrap();
        assert_eq!((r.s_div_u, r.s_div_l, r.t_div_u, r.t_div_l), d);
        assert!(r.s_div_u > 0.0);
    }

    #[test]
    fn same_seed_same_report_and_csv() {
        let c = small_corpus();
        let opts = EvalOptions {
            samples: 3,
            seed: 2,
            max_sequences: None,
        };
        let a = evaluate_model(&Noisy(0.1), &c, Split::Test, &opts).unwrap();
        let b = evaluate_model(&Noisy(0.1), &c, Split::Test, &opts).unwrap();
        assert_eq!(a.csv_row(), b.csv_row());
        assert_eq!(MetricReport::csv_header(), "lve,dtw,l_pcc,l_ccc,fdd_u,fdd_l,s_div_u,s_div_l,t_div_u,t_div_l");
        let parsed: Vec<f64> = a.csv_row().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, a.values().to_vec());
        let table = format_table(&[("noisy".into(), a)]);
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("model"));
    }

    #[test]
    fn sampler_errors_name_the_sequence() {
        struct Broken;
        impl Sampler for Broken {
            fn sample(&self, _: &SequenceRecord, _: u64) -> Result<ExpressionSequence> {
                ExpressionSequence::new(Mat::zeros((3, 4)))
            }
        }
        let c = small_corpus();
        let idx = c.indices(Split::Test)[0];
        let e = evaluate_model(&Broken, &c, Split::Test, &EvalOptions::default()).unwrap_err();
        assert!(e.to_string().contains(&format!("test sequence {idx}")), "{e}");
        assert!(matches!(e.root(), Error::InvalidArgument(_)));
    }

    #[test]
    fn lineage_mismatch_is_refused() {
        struct Foreign(Lineage);
        impl Sampler for Foreign {
            fn sample(&self, rec: &SequenceRecord, _: u64) -> Result<ExpressionSequence> {
                Ok(rec.expressions.clone())
            }
            fn lineage(&self) -> Option<&Lineage> {
                Some(&self.0)
            }
        }
        let c = small_corpus();
        let mut other = c.lineage();
        other.codebook_id = "0".repeat(64);
        let opts = EvalOptions {
            samples: 2,
            ..Default::default()
        };
        assert!(matches!(
            evaluate_model(&Foreign(other), &c, Split::Test, &opts),
            Err(Error::Lineage(_))
        ));
        assert!(evaluate_model(&Foreign(c.lineage()), &c, Split::Test, &opts).is_ok());
    }
}
