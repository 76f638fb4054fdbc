//! Adversarial training of the generator against the two discriminators.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svbrdf_tensor::{Element, Graph, ParamSet, Tensor, Var};

use crate::datagen::{DatasetManifest, Split, MANIFEST_FILE};
use crate::error::{invalid, io_err, Error, Result};
use crate::image::{load_material, read_ldr_png, LdrImage};
use crate::losses::{
    feature_matching, lsgan_d, lsgan_g, parameter_loss_graph, rendering_loss_graph, LossReport, LossWeights,
    CSV_HEADER,
};
use crate::maps::{SvbrdfMaps, PARAM_CHANNELS};
use crate::networks::{Discriminators, Generator};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::render::{sample_loss_views, SceneConfig};

pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const DISC1_CKPT: &str = "disc1.ckpt";
pub const DISC2_CKPT: &str = "disc2.ckpt";
pub const LOSS_CSV: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub width_scale: f64,
    pub resolution: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            steps_per_epoch: 5000,
            batch_size: 8,
            lr0: 2e-4,
            adam: AdamConfig::default(),
            width_scale: 1.0,
            resolution: 512,
            weights: LossWeights::default(),
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

const KEYS: [&str; 15] = [
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "lr0",
    "beta1",
    "beta2",
    "eps",
    "width_scale",
    "resolution",
    "enable_r",
    "enable_p",
    "enable_a",
    "enable_f",
    "lambda_f",
    "n_render_views",
];

impl TrainConfig {
    /// 64 px crops, one eighth of the channels, batches of 4. The narrow
    /// networks need a higher learning rate than the full-size 2e-4 to make
    /// progress in a few thousand steps.
    pub fn toy() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 200,
            batch_size: 4,
            lr0: 1e-3,
            width_scale: 0.125,
            resolution: 64,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(invalid("epochs, steps_per_epoch and batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.width_scale > 0.0) {
            return Err(invalid("lr0 and width_scale must be positive"));
        }
        if self.resolution == 0 || self.resolution % 8 != 0 {
            return Err(invalid(format!("resolution {} must be a positive multiple of 8", self.resolution)));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.scene.validate()
    }

    /// Set one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
        }
        let w = &mut self.weights;
        match key.trim() {
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "width_scale" => self.width_scale = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "enable_r" => w.enable_r = parse(key, value)?,
            "enable_p" => w.enable_p = parse(key, value)?,
            "enable_a" => w.enable_a = parse(key, value)?,
            "enable_f" => w.enable_f = parse(key, value)?,
            "lambda_f" => w.lambda_f_disc = parse(key, value)?,
            "n_render_views" => w.n_render_views = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` file on top of `self`; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let w = &self.weights;
        let values = [
            self.epochs.to_string(),
            self.steps_per_epoch.to_string(),
            self.batch_size.to_string(),
            self.lr0.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.width_scale.to_string(),
            self.resolution.to_string(),
            w.enable_r.to_string(),
            w.enable_p.to_string(),
            w.enable_a.to_string(),
            w.enable_f.to_string(),
            w.lambda_f_disc.to_string(),
            w.n_render_views.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        writeln!(out, "seed = {}", self.seed).expect("writing to a String");
        out
    }
}

/// `[1, 3, H, W]` tensor of an LDR image.
pub fn image_tensor<T: Element>(img: &LdrImage) -> Tensor<T> {
    let n = img.width * img.height;
    let mut data = vec![T::zero(); 3 * n];
    for i in 0..n {
        let p = img.pixel(i);
        for c in 0..3 {
            data[c * n + i] = T::of(p[c]);
        }
    }
    Tensor::new(&[1, 3, img.height, img.width], data).expect("length matches shape")
}

/// Inputs and ground truth of one split, held in memory.
pub struct SampleSet<T: Element> {
    pub inputs: Vec<Tensor<T>>,
    /// Index into `maps` for each input.
    pub target: Vec<usize>,
    pub maps: Vec<SvbrdfMaps>,
    pub map_tensors: Vec<Tensor<T>>,
}

impl<T: Element> SampleSet<T> {
    pub fn load(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut set = Self {
            inputs: Vec::new(),
            target: Vec::new(),
            maps: Vec::new(),
            map_tensors: Vec::new(),
        };
        for r in manifest.split(split) {
            let k = match index.get(r.maps_dir.as_str()) {
                Some(k) => *k,
                None => {
                    let maps = load_material(&root.join(&r.maps_dir))?;
                    set.map_tensors.push(maps.to_tensor());
                    set.maps.push(maps);
                    index.insert(&r.maps_dir, set.maps.len() - 1);
                    set.maps.len() - 1
                }
            };
            let img = read_ldr_png(&root.join(&r.input_path))?;
            if (img.width, img.height) != set.maps[k].resolution() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: input {}x{} vs maps {:?}",
                    r.input_path,
                    img.width,
                    img.height,
                    set.maps[k].resolution()
                )));
            }
            set.inputs.push(image_tensor(&img));
            set.target.push(k);
        }
        if set.inputs.is_empty() {
            return Err(invalid(format!("dataset has no {} samples", split.name())));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.maps[0].resolution()
    }

    /// Stacked inputs and targets of `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let x: Vec<Tensor<T>> = indices.iter().map(|i| self.inputs[*i].clone()).collect();
        let y: Vec<Tensor<T>> = indices.iter().map(|i| self.map_tensors[self.target[*i]].clone()).collect();
        Ok((Tensor::stack_batch(&x)?, Tensor::stack_batch(&y)?))
    }
}

/// Networks, optimizers and the random stream of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator<f32>,
    pub disc: Discriminators<f32>,
    opt_g: Adam<f32>,
    opt_d: [Adam<f32>; 2],
    rng: ChaCha8Rng,
    step: usize,
}

fn sum_terms(g: &mut Graph<f32>, terms: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for t in terms {
        acc = Some(match acc {
            None => *t,
            Some(a) => g.add(a, *t)?,
        });
    }
    Ok(acc)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = Generator::new(cfg.width_scale, &mut rng)?;
        let disc = Discriminators::new(cfg.width_scale, &mut rng)?;
        let opt_g = Adam::for_tensors(gen.params().tensors(), cfg.adam)?;
        let opt_d = [
            Adam::for_tensors(disc.d1.params().tensors(), cfg.adam)?,
            Adam::for_tensors(disc.d2.params().tensors(), cfg.adam)?,
        ];
        Ok(Self {
            cfg,
            gen,
            disc,
            opt_g,
            opt_d,
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, x: &Tensor<f32>, real: &Tensor<f32>, lr: f64) -> Result<LossReport> {
        let w = self.cfg.weights;
        let batch = x.shape()[0];
        let adversarial = w.enable_a || w.enable_f;

        let mut gg = Graph::new();
        let gp = self.gen.params().bind(&mut gg, true);
        let xv = gg.constant(x.clone());
        let fake = self.gen.forward(&mut gg, &gp, xv)?;

        let mut report = LossReport::default();
        if adversarial {
            let mut gd = Graph::new();
            let dp = self.disc.bind(&mut gd, true);
            let xd = gd.constant(x.clone());
            let rd = gd.constant(real.clone());
            let fd = gd.constant(gg.value(fake).clone());
            let real_out = self.disc.discriminate(&mut gd, &dp, xd, rd)?;
            let fake_out = self.disc.discriminate(&mut gd, &dp, xd, fd)?;
            let mut terms = Vec::new();
            if w.enable_a {
                let l = lsgan_d(&mut gd, &real_out, &fake_out)?;
                report.l_a_d = gd.value(l).item().as_f64();
                terms.push(l);
            }
            if w.enable_f {
                let l = feature_matching(&mut gd, &real_out, &fake_out)?;
                terms.push(gd.scale(l, w.lambda_f_disc));
            }
            let total = sum_terms(&mut gd, &terms)?.expect("at least one discriminator term");
            report.total_d = gd.value(total).item().as_f64();
            if !report.total_d.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    what: format!("discriminator loss {}", report.total_d),
                });
            }
            let mut grads = gd.backward(total)?;
            for (k, net) in [&mut self.disc.d1, &mut self.disc.d2].into_iter().enumerate() {
                let g = dp[k].grads(&mut grads);
                self.opt_d[k].step_tensors(net.params_mut().tensors_mut(), &g, lr)?;
            }
        }

        let mut terms = Vec::new();
        if w.enable_p {
            let rv = gg.constant(real.clone());
            let l = parameter_loss_graph(&mut gg, fake, rv)?;
            report.l_p = gg.value(l).item().as_f64();
            terms.push(l);
        }
        if w.enable_r {
            let views = (0..batch)
                .map(|_| sample_loss_views(&mut self.rng, w.n_render_views, &self.cfg.scene))
                .collect::<Result<Vec<_>>>()?;
            let l = rendering_loss_graph(&mut gg, fake, real, views, &self.cfg.scene)?;
            report.l_r = gg.value(l).item().as_f64();
            terms.push(l);
        }
        if adversarial {
            let dp = self.disc.bind(&mut gg, false);
            let fake_out = self.disc.discriminate(&mut gg, &dp, xv, fake)?;
            if w.enable_a {
                let l = lsgan_g(&mut gg, &fake_out)?;
                report.l_a_g = gg.value(l).item().as_f64();
                terms.push(l);
            }
            if w.enable_f {
                let rv = gg.constant(real.clone());
                let real_out = self.disc.discriminate(&mut gg, &dp, xv, rv)?;
                let l = feature_matching(&mut gg, &real_out, &fake_out)?;
                report.l_f = gg.value(l).item().as_f64();
                terms.push(l);
            }
        }
        let sum = sum_terms(&mut gg, &terms)?.ok_or_else(|| invalid("every generator loss term is disabled"))?;
        let total = gg.scale(sum, 0.25);
        report.total_g = gg.value(total).item().as_f64();
        if !report.total_g.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                what: format!("generator loss {}", report.total_g),
            });
        }
        let mut grads = gg.backward(total)?;
        let g = gp.grads(&mut grads);
        self.opt_g.step_tensors(self.gen.params_mut().tensors_mut(), &g, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Random batch indices drawn from the trainer's stream.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect()
    }

    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.gen.params().save(dir.join(GENERATOR_CKPT))?;
        self.disc.d1.params().save(dir.join(DISC1_CKPT))?;
        self.disc.d2.params().save(dir.join(DISC2_CKPT))?;
        Ok(())
    }
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    Generator::from_params(ParamSet::load(path)?)
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub generator: Generator<f32>,
    pub disc: Discriminators<f32>,
}

/// Train on the `train` split of the dataset under `dataset_root`.
///
/// Writes `config.txt`, `losses.csv` (one row per step), the initial networks
/// to `checkpoints/epoch_0000` and the networks after epoch `e` to
/// `checkpoints/epoch_<e+1>`, and the final networks to `out_dir`.
pub fn train(cfg: &TrainConfig, dataset_root: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let manifest = DatasetManifest::read(&dataset_root.join(MANIFEST_FILE))?;
    let data = SampleSet::<f32>::load(dataset_root, &manifest, Split::Train)?;
    train_on(cfg, &data, out_dir)
}

pub fn train_on(cfg: &TrainConfig, data: &SampleSet<f32>, out_dir: &Path) -> Result<TrainOutcome> {
    let (w, h) = data.resolution();
    if (w, h) != (cfg.resolution, cfg.resolution) {
        return Err(invalid(format!(
            "dataset resolution {w}x{h} does not match configured {}",
            cfg.resolution
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_kv()).map_err(|e| io_err(&cfg_path, e))?;
    let csv_path = out_dir.join(LOSS_CSV);
    let mut csv = BufWriter::new(fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| io_err(&csv_path, e))?;

    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.save_checkpoints(&epoch_dir(out_dir, 0))?;
    let mut reports = Vec::with_capacity(cfg.total_steps());
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr0)?;
        for _ in 0..cfg.steps_per_epoch {
            let idx = trainer.sample_indices(data.len());
            let (x, y) = data.batch(&idx)?;
            let report = trainer.train_step(&x, &y, lr)?;
            writeln!(csv, "{}", report.csv_row(trainer.steps_done())).map_err(|e| io_err(&csv_path, e))?;
            reports.push(report);
        }
        csv.flush().map_err(|e| io_err(&csv_path, e))?;
        trainer.save_checkpoints(&epoch_dir(out_dir, epoch + 1))?;
        let last = reports.last().expect("at least one step per epoch");
        info!(
            "epoch {}/{}: lr {lr:.2e} total_g {:.4} total_d {:.4} l_p {:.4}",
            epoch + 1,
            cfg.epochs,
            last.total_g,
            last.total_d,
            last.l_p
        );
    }
    trainer.save_checkpoints(out_dir)?;
    Ok(TrainOutcome {
        reports,
        generator: trainer.gen,
        disc: trainer.disc,
    })
}

/// Predicted maps for one LDR input.
pub fn predict(gen: &Generator<f32>, input: &LdrImage) -> Result<SvbrdfMaps> {
    predict_tensor(gen, &image_tensor(input))
}

pub fn predict_tensor(gen: &Generator<f32>, x: &Tensor<f32>) -> Result<SvbrdfMaps> {
    let mut g = Graph::new();
    let p = gen.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = gen.forward(&mut g, &p, xv)?;
    debug_assert_eq!(g.value(y).shape()[1], PARAM_CHANNELS);
    SvbrdfMaps::from_tensor(g.value(y), 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_kv_roundtrip() {
        let mut cfg = TrainConfig::toy();
        cfg.weights.enable_r = false;
        cfg.seed = 42;
        let mut back = TrainConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.apply_kv("nonsense = 1").is_err());
        assert!(back.apply_kv("epochs 3").is_err());
        back.apply_kv("# comment\nepochs = 3 # trailing\n\n").unwrap();
        assert_eq!(back.epochs, 3);
    }
}
