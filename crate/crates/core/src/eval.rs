//! Per-map error metrics, held-out losses and the loss-term ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svbrdf_tensor::{Element, Graph, ParamSet};

use crate::datagen::{DatasetManifest, Split, MANIFEST_FILE};
use crate::error::{invalid, io_err, Error, Result};
use crate::losses::{feature_matching, lsgan_g, parameter_loss, rendering_loss, DEFAULT_RENDER_VIEWS};
use crate::maps::SvbrdfMaps;
use crate::math::Vec3;
use crate::networks::{Discriminator, Discriminators, Generator};
use crate::render::{sample_loss_views, SceneConfig};
use crate::train::{
    load_generator, predict_tensor, train_on, SampleSet, TrainConfig, TrainOutcome, DISC1_CKPT, DISC2_CKPT,
    GENERATOR_CKPT,
};

pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// Root-mean-square errors of each map, pooled over texels (and channels).
/// The normal error is the angle between unit normals in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapErrors {
    pub base_color: f64,
    pub normal: f64,
    pub roughness: f64,
    pub metallic: f64,
    pub diffuse: f64,
    pub specular: f64,
}

/// Sums of squared errors and their counts, in [`MapErrors`] field order.
#[derive(Clone, Debug, Default)]
pub struct ErrorAccumulator {
    sq: [f64; 6],
    count: [usize; 6],
}

fn add_sq(acc: &mut (f64, usize), a: &[f64], b: &[f64]) {
    for (x, y) in a.iter().zip(b) {
        acc.0 += (x - y) * (x - y);
    }
    acc.1 += a.len();
}

impl ErrorAccumulator {
    pub fn add(&mut self, pred: &SvbrdfMaps, gt: &SvbrdfMaps) -> Result<()> {
        if pred.resolution() != gt.resolution() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.resolution(),
                gt.resolution()
            )));
        }
        let (ps, gs) = (pred.split(), gt.split());
        let pairs: [(&[f64], &[f64]); 6] = [
            (pred.base_color(), gt.base_color()),
            (&[], &[]),
            (pred.roughness(), gt.roughness()),
            (pred.metallic(), gt.metallic()),
            (&ps.diffuse, &gs.diffuse),
            (&ps.specular, &gs.specular),
        ];
        for (k, (a, b)) in pairs.iter().enumerate() {
            let mut acc = (self.sq[k], self.count[k]);
            add_sq(&mut acc, a, b);
            (self.sq[k], self.count[k]) = acc;
        }
        for (a, b) in pred.normal().chunks_exact(3).zip(gt.normal().chunks_exact(3)) {
            let a = Vec3::new(a[0], a[1], a[2]).normalize();
            let b = Vec3::new(b[0], b[1], b[2]).normalize();
            let angle = a.dot(b).clamp(-1.0, 1.0).acos();
            self.sq[1] += angle * angle;
        }
        self.count[1] += pred.pixel_count();
        Ok(())
    }

    pub fn finish(&self) -> Result<MapErrors> {
        if self.count.contains(&0) {
            return Err(invalid("no samples were accumulated"));
        }
        let r: [f64; 6] = std::array::from_fn(|k| (self.sq[k] / self.count[k] as f64).sqrt());
        Ok(MapErrors {
            base_color: r[0],
            normal: r[1],
            roughness: r[2],
            metallic: r[3],
            diffuse: r[4],
            specular: r[5],
        })
    }
}

pub fn map_errors(pred: &SvbrdfMaps, gt: &SvbrdfMaps) -> Result<MapErrors> {
    let mut acc = ErrorAccumulator::default();
    acc.add(pred, gt)?;
    acc.finish()
}

/// The four training objectives measured on held-out samples. The adversarial
/// and feature terms need a reference discriminator pair and are `None` without one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldOutLosses {
    pub l_p: f64,
    pub l_r: f64,
    pub l_a: Option<f64>,
    pub l_f: Option<f64>,
}

impl HeldOutLosses {
    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::Rendering => Some(self.l_r),
            Term::Parameter => Some(self.l_p),
            Term::Feature => self.l_f,
            Term::Adversarial => self.l_a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub native: MapErrors,
    pub half: MapErrors,
    pub held_out: HeldOutLosses,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationTable>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Evaluate `gen` on every sample of `data`.
///
/// Rendering-loss views are drawn from `seed` in sample order, so two
/// generators evaluated with the same seed see identical views.
pub fn evaluate(
    gen: &Generator<f32>,
    data: &SampleSet<f32>,
    reference: Option<&Discriminators<f32>>,
    scene: &SceneConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut native, mut half) = (ErrorAccumulator::default(), ErrorAccumulator::default());
    let (mut l_p, mut l_r, mut l_a, mut l_f) = (0.0, 0.0, 0.0, 0.0);
    for (i, x) in data.inputs.iter().enumerate() {
        let gt = &data.maps[data.target[i]];
        let pred = predict_tensor(gen, x)?;
        native.add(&pred, gt)?;
        half.add(&pred.downsample_half()?, &gt.downsample_half()?)?;
        l_p += parameter_loss(&pred, gt)?;
        let views = sample_loss_views(&mut rng, DEFAULT_RENDER_VIEWS, scene)?;
        l_r += rendering_loss(&pred, gt, &views, scene)?;
        if let Some(d) = reference {
            let mut g = Graph::new();
            let dp = d.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let fv = g.constant(pred.to_tensor());
            let rv = g.constant(data.map_tensors[data.target[i]].clone());
            let fake = d.discriminate(&mut g, &dp, xv, fv)?;
            let real = d.discriminate(&mut g, &dp, xv, rv)?;
            let a = lsgan_g(&mut g, &fake)?;
            let f = feature_matching(&mut g, &real, &fake)?;
            l_a += g.value(a).item().as_f64();
            l_f += g.value(f).item().as_f64();
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        samples: data.len(),
        native: native.finish()?,
        half: half.finish()?,
        held_out: HeldOutLosses {
            l_p: l_p / n,
            l_r: l_r / n,
            l_a: reference.map(|_| l_a / n),
            l_f: reference.map(|_| l_f / n),
        },
        ablation: None,
    })
}

/// Discriminators saved next to a generator checkpoint, if both are present.
pub fn load_discriminators(dir: &Path) -> Result<Option<Discriminators<f32>>> {
    let (p1, p2) = (dir.join(DISC1_CKPT), dir.join(DISC2_CKPT));
    if !(p1.exists() && p2.exists()) {
        return Ok(None);
    }
    Ok(Some(Discriminators {
        d1: Discriminator::from_params(ParamSet::load(&p1)?)?,
        d2: Discriminator::from_params(ParamSet::load(&p2)?)?,
    }))
}

/// Evaluate the networks in `checkpoint_dir` on the test split under `dataset_root`.
pub fn evaluate_checkpoint(checkpoint_dir: &Path, dataset_root: &Path, scene: &SceneConfig, seed: u64) -> Result<EvalReport> {
    let gen = load_generator(&checkpoint_dir.join(GENERATOR_CKPT))?;
    let disc = load_discriminators(checkpoint_dir)?;
    let manifest = DatasetManifest::read(&dataset_root.join(MANIFEST_FILE))?;
    let data = SampleSet::load(dataset_root, &manifest, Split::Test)?;
    evaluate(&gen, &data, disc.as_ref(), scene, seed)
}

/// A generator loss term that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    Rendering,
    Parameter,
    Feature,
    Adversarial,
}

impl Term {
    /// Column order of the ablation grid.
    pub const ALL: [Term; 4] = [Term::Rendering, Term::Parameter, Term::Feature, Term::Adversarial];

    pub fn label(self) -> &'static str {
        match self {
            Term::Rendering => "-L_r",
            Term::Parameter => "-L_p",
            Term::Feature => "-L_f",
            Term::Adversarial => "-L_a",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Term::Rendering => "no_l_r",
            Term::Parameter => "no_l_p",
            Term::Feature => "no_l_f",
            Term::Adversarial => "no_l_a",
        }
    }

    pub fn disable(self, cfg: &mut TrainConfig) {
        let w = &mut cfg.weights;
        match self {
            Term::Rendering => w.enable_r = false,
            Term::Parameter => w.enable_p = false,
            Term::Feature => w.enable_f = false,
            Term::Adversarial => w.enable_a = false,
        }
    }
}

/// Rows of the ablation grid.
pub const GRID_ROWS: [&str; 4] = ["Diffuse", "Specular", "Normal", "Roughness"];

fn grid_values(e: &MapErrors) -> [f64; 4] {
    [e.diffuse, e.specular, e.normal, e.roughness]
}

/// `(proposed - ablated) / proposed * 100`; negative when the ablated run is worse.
pub fn percent_worse(proposed: f64, ablated: f64) -> f64 {
    (proposed - ablated) / proposed * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub term: Term,
    pub errors: MapErrors,
    pub held_out: HeldOutLosses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub proposed: MapErrors,
    pub proposed_held_out: HeldOutLosses,
    pub entries: Vec<AblationEntry>,
}

impl AblationTable {
    pub fn entry(&self, term: Term) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.term == term)
    }

    /// `grid[row][col] = (ablated RMSE, percent worse)` with rows [`GRID_ROWS`]
    /// and columns [`Term::ALL`].
    pub fn grid(&self) -> Result<[[(f64, f64); 4]; 4]> {
        let base = grid_values(&self.proposed);
        let mut out = [[(0.0, 0.0); 4]; 4];
        for (col, term) in Term::ALL.into_iter().enumerate() {
            let e = self
                .entry(term)
                .ok_or_else(|| invalid(format!("ablation table has no {} run", term.label())))?;
            let v = grid_values(&e.errors);
            for row in 0..4 {
                out[row][col] = (v[row], percent_worse(base[row], v[row]));
            }
        }
        Ok(out)
    }

    /// Percent change of the held-out loss that the ablated term optimizes.
    pub fn held_out_change(&self, term: Term) -> Option<f64> {
        let e = self.entry(term)?;
        Some(percent_worse(self.proposed_held_out.get(term)?, e.held_out.get(term)?))
    }

    pub fn to_markdown(&self) -> Result<String> {
        let grid = self.grid()?;
        let base = grid_values(&self.proposed);
        let mut s = String::from("| Map | Proposed |");
        for t in Term::ALL {
            write!(s, " {} | % worse |", t.label()).expect("writing to a String");
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|---|".repeat(4));
        s.push('\n');
        for (row, name) in GRID_ROWS.iter().enumerate() {
            write!(s, "| {name} | {:.4} |", base[row]).expect("writing to a String");
            for (v, pct) in grid[row] {
                write!(s, " {v:.4} | {pct:.2} |").expect("writing to a String");
            }
            s.push('\n');
        }
        Ok(s)
    }
}

/// Train the proposed configuration (unless given) and one run per disabled
/// term, then evaluate all of them on `test`. Runs go to `out_dir/proposed`
/// and `out_dir/<Term::dir_name>`; the held-out adversarial and feature
/// losses of every run are measured against the proposed run's discriminators.
pub fn run_ablation(
    cfg: &TrainConfig,
    train: &SampleSet<f32>,
    test: &SampleSet<f32>,
    out_dir: &Path,
    proposed: Option<TrainOutcome>,
    eval_seed: u64,
) -> Result<AblationTable> {
    let proposed = match proposed {
        Some(p) => p,
        None => train_on(cfg, train, &out_dir.join("proposed"))?,
    };
    let reference = &proposed.disc;
    let base = evaluate(&proposed.generator, test, Some(reference), &cfg.scene, eval_seed)?;
    let mut entries = Vec::with_capacity(4);
    for term in Term::ALL {
        let mut c = cfg.clone();
        term.disable(&mut c);
        let run = train_on(&c, train, &out_dir.join(term.dir_name()))?;
        let r = evaluate(&run.generator, test, Some(reference), &cfg.scene, eval_seed)?;
        entries.push(AblationEntry {
            term,
            errors: r.native,
            held_out: r.held_out,
        });
    }
    Ok(AblationTable {
        proposed: base.native,
        proposed_held_out: base.held_out,
        entries,
    })
}
