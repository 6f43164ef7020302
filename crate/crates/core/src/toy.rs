//! Desk-scale dense-prediction benchmark.
//!
//! Targets are piecewise-constant images with sharp edges; inputs are their
//! 2×2 average-pooled (plus noisy) versions. A small network
//! `stem conv 3×3 + ReLU → upsampler ×2 → head conv 1×1` learns to restore the
//! full-resolution target, so the upsampler decides how well edges survive.
//! This is an analogue of detection/segmentation benchmarks, not a
//! reproduction of them.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::baselines::{CarafeSettings, Upsampler, UpsamplerCache, UpsamplerKind};
use crate::carafe::CarafeConfig;
use crate::conv::{Conv2d, ConvSpec};
use crate::error::{config_err, Error, Result};
use crate::exec;
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Rectangles,
    Voronoi,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangles" => Ok(Self::Rectangles),
            "voronoi" => Ok(Self::Voronoi),
            other => Err(config_err!("unknown pattern '{other}'")),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rectangles => "rectangles",
            Self::Voronoi => "voronoi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTaskSpec {
    /// Target extent (square); inputs are half this size.
    pub image_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub pattern: Pattern,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_train: 512,
            n_eval: 128,
            pattern: Pattern::Rectangles,
            seed: 0,
            noise_std: 0.02,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || !self.image_size.is_multiple_of(2) {
            return Err(config_err!("image_size must be even and >= 2"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(config_err!("sample counts must be >= 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config_err!("noise_std must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1 × S/2 × S/2`.
    pub input: Tensor,
    /// `1 × S × S`.
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// `count` values in `[0, 1]` at least `gap` apart.
fn distinct_values(rng: &mut Rng, count: usize, gap: f64) -> Vec<f64> {
    let mut vals: Vec<f64> = Vec::with_capacity(count);
    while vals.len() < count {
        let v = rng.uniform(0.0, 1.0);
        if vals.iter().all(|u| (u - v).abs() >= gap) {
            vals.push(v);
        }
    }
    vals
}

fn rectangles(rng: &mut Rng, size: usize) -> Tensor {
    let n = rng.int_inclusive(5, 10);
    let vals = distinct_values(rng, n + 1, 0.05);
    let mut t = Tensor::full(&[1, size, size], vals[0]);
    let min_side = (size / 8).max(1);
    for &v in &vals[1..] {
        let h = rng.int_inclusive(min_side, size / 2);
        let w = rng.int_inclusive(min_side, size / 2);
        let y0 = rng.int_inclusive(0, size - h);
        let x0 = rng.int_inclusive(0, size - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                t.set3(0, y, x, v);
            }
        }
    }
    t
}

fn voronoi(rng: &mut Rng, size: usize) -> Tensor {
    let n = rng.int_inclusive(5, 10);
    let vals = distinct_values(rng, n, 0.05);
    let sites: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.uniform(0.0, size as f64), rng.uniform(0.0, size as f64)))
        .collect();
    Tensor::from_fn3(1, size, size, |_, y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let nearest = (0..n)
            .min_by(|&a, &b| {
                let da = (sites[a].0 - py).powi(2) + (sites[a].1 - px).powi(2);
                let db = (sites[b].0 - py).powi(2) + (sites[b].1 - px).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        vals[nearest]
    })
}

/// 2×2 average pooling of a `1 × S × S` map.
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(config_err!("cannot 2×2-pool a {h}×{w} map"));
    }
    Ok(Tensor::from_fn3(c, h / 2, w / 2, |ci, y, x| {
        (t.at3(ci, 2 * y, 2 * x)
            + t.at3(ci, 2 * y, 2 * x + 1)
            + t.at3(ci, 2 * y + 1, 2 * x)
            + t.at3(ci, 2 * y + 1, 2 * x + 1))
            / 4.0
    }))
}

pub fn make_sample(target: Tensor, noise_std: f64, rng: &mut Rng) -> Result<Sample> {
    let mut input = avg_pool2(&target)?;
    if noise_std > 0.0 {
        let noise = rng.normal(input.len(), noise_std);
        input.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
    }
    Ok(Sample { input, target })
}

pub fn gen_task(spec: &ToyTaskSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut draw = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let target = match spec.pattern {
                    Pattern::Rectangles => rectangles(&mut rng, spec.image_size),
                    Pattern::Voronoi => voronoi(&mut rng, spec.image_size),
                };
                make_sample(target, spec.noise_std, &mut rng)
            })
            .collect()
    };
    let train = draw(spec.n_train)?;
    let eval = draw(spec.n_eval)?;
    Ok(ToyDataset { train, eval })
}

/// CARAFE settings used by the toy network: the standard window sizes with
/// the compressor at half the feature channels.
pub fn toy_carafe_settings(channels: usize) -> CarafeSettings {
    CarafeSettings {
        c_mid: Some((channels / 2).max(1)),
        ..CarafeSettings::default()
    }
}

/// Factor applied to the He-initialized CARAFE encoder weights.
pub const ENCODER_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub stem: Conv2d,
    pub upsampler: Upsampler,
    pub head: Conv2d,
}

pub struct ModelCache {
    stem_pre: Tensor,
    up_cache: UpsamplerCache,
    up_out: Tensor,
}

impl ToyModel {
    pub const DEFAULT_CHANNELS: usize = 16;

    /// `kind` of `UpsamplerKind::Carafe(_)` is used as given; pass
    /// [`toy_carafe_settings`] for the benchmark default.
    pub fn init(kind: UpsamplerKind, channels: usize, rng: &mut Rng) -> Result<Self> {
        let stem = Conv2d::init(ConvSpec::new(1, channels, 3)?, rng);
        let upsampler = Upsampler::init(kind, channels, 2, rng)?;
        let mut head = Conv2d::init(ConvSpec::new(channels, 1, 1)?, rng);
        head.weight.data_mut().iter_mut().for_each(|v| *v /= (channels as f64).sqrt());
        let mut upsampler = upsampler;
        if let Upsampler::Carafe { params, .. } = &mut upsampler {
            // Start near uniform kernels.
            params.encoder.weight.data_mut().iter_mut().for_each(|v| *v *= ENCODER_INIT_SCALE);
        }
        Ok(Self { stem, upsampler, head })
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ModelCache)> {
        let stem_pre = self.stem.forward(input)?;
        let mut stem_out = stem_pre.clone();
        stem_out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let (up_out, up_cache) = self.upsampler.forward(&stem_out)?;
        let y = self.head.forward(&up_out)?;
        Ok((
            y,
            ModelCache {
                stem_pre,
                up_cache,
                up_out,
            },
        ))
    }

    /// Gradient of the loss wrt every parameter, in the layout of `self`.
    pub fn backward(&self, grad_y: &Tensor, input: &Tensor, cache: &ModelCache) -> Result<ToyModel> {
        let (g_up, head) = self.head.backward(grad_y, &cache.up_out)?;
        let (mut g_stem, upsampler) = self.upsampler.backward(&g_up, &cache.up_cache)?;
        for (g, &pre) in g_stem.data_mut().iter_mut().zip(cache.stem_pre.data()) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        let (_, stem) = self.stem.backward(&g_stem, input)?;
        Ok(Self { stem, upsampler, head })
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.stem.slices();
        v.extend(self.upsampler.slices());
        v.extend(self.head.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.stem.slices_mut();
        v.extend(self.upsampler.slices_mut());
        v.extend(self.head.slices_mut());
        v
    }

    /// Every parameter as a named tensor. CARAFE parameters keep the names of
    /// [`crate::CarafeParams::named_tensors`]; biases are rank 1.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let conv = |prefix: &str, c: &Conv2d| {
            vec![
                (format!("{prefix}.weight"), c.weight.clone()),
                (format!("{prefix}.bias"), Tensor::new(vec![c.bias.len()], c.bias.clone()).expect("bias")),
            ]
        };
        let mut out = conv("stem", &self.stem);
        match &self.upsampler {
            Upsampler::Carafe { params, .. } => out.extend(params.named_tensors()),
            Upsampler::NearestConv { conv: c, .. }
            | Upsampler::BilinearConv { conv: c, .. }
            | Upsampler::PixelShuffle { conv: c, .. }
            | Upsampler::SpatialAttention { conv: c, .. } => out.extend(conv("upsampler", c)),
            Upsampler::Deconv(d) => {
                out.push(("upsampler.weight".into(), d.weight.clone()));
                out.push(("upsampler.bias".into(), Tensor::new(vec![d.bias.len()], d.bias.clone()).expect("bias")));
            }
            Upsampler::Nearest { .. } | Upsampler::Bilinear { .. } => {}
        }
        out.extend(conv("head", &self.head));
        out
    }

    /// The upsampler's configuration, when it is CARAFE.
    pub fn carafe_config(&self) -> Option<&CarafeConfig> {
        match &self.upsampler {
            Upsampler::Carafe { cfg, .. } => Some(cfg),
            _ => None,
        }
    }
}

/// Which parameters the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainScope {
    #[default]
    All,
    /// Only the head bias: a one-parameter convex problem, for sanity checks.
    HeadBias,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scope: TrainScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.04,
            momentum: 0.9,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            scope: TrainScope::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_err!("lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub kind: UpsamplerKind,
    pub seed: u64,
    /// Mean training loss seen during each epoch.
    pub train_losses: Vec<f64>,
    /// Evaluation MSE after each epoch.
    pub eval_losses: Vec<f64>,
    pub wall_time: Duration,
}

impl ExperimentResult {
    pub fn final_eval(&self) -> f64 {
        *self.eval_losses.last().expect("at least one epoch")
    }

    pub fn final_train(&self) -> f64 {
        *self.train_losses.last().expect("at least one epoch")
    }
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.same_shape(target)?;
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<f64> {
    let losses = exec::map_range(samples.len(), |i| -> Result<f64> {
        let (y, _) = model.forward(&samples[i].input)?;
        Ok(mse(&y, &samples[i].target)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// SGD-with-momentum on the mean-squared error, batch gradients averaged
/// over samples in shuffled order.
pub fn train(model: &mut ToyModel, data: &ToyDataset, cfg: &TrainConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed ^ 0x5e_ed0f_0a7a);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut eval_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<ToyModel> = None;
            for &idx in batch {
                let s = &data.train[idx];
                let (y, cache) = model.forward(&s.input)?;
                let (loss, g) = mse(&y, &s.target)?;
                let g = model.backward(&g, &s.input, &cache)?;
                epoch_loss += loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.slices_mut().into_iter().zip(g.slices()) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for s in grads.slices_mut() {
                s.iter_mut().for_each(|v| *v *= scale);
            }
            match cfg.scope {
                TrainScope::All => opt.step(model.slices_mut(), grads.slices())?,
                TrainScope::HeadBias => opt.step(vec![&mut model.head.bias], vec![&grads.head.bias])?,
            }
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let eval_loss = evaluate(model, &data.eval)?;
        if !train_loss.is_finite() || !eval_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        train_losses.push(train_loss);
        eval_losses.push(eval_loss);
    }
    Ok(ExperimentResult {
        kind: model.upsampler.kind(),
        seed: cfg.seed,
        train_losses,
        eval_losses,
        wall_time: start.elapsed(),
    })
}

/// Builds the toy network for `kind` (CARAFE with [`toy_carafe_settings`]),
/// generates the task for `task.seed` and trains with `cfg`.
pub fn train_model(
    kind: UpsamplerKind,
    channels: usize,
    task: &ToyTaskSpec,
    cfg: &TrainConfig,
) -> Result<(ToyModel, ExperimentResult)> {
    let kind = match kind {
        UpsamplerKind::Carafe(_) => UpsamplerKind::Carafe(toy_carafe_settings(channels)),
        k => k,
    };
    let data = gen_task(task)?;
    let mut model = ToyModel::init(kind, channels, &mut Rng::new(cfg.seed))?;
    let result = train(&mut model, &data, cfg)?;
    Ok((model, result))
}

pub fn run_experiment(kind: UpsamplerKind, channels: usize, task: &ToyTaskSpec, cfg: &TrainConfig) -> Result<ExperimentResult> {
    train_model(kind, channels, task, cfg).map(|(_, r)| r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindSummary {
    pub kind: UpsamplerKind,
    pub mean_eval: f64,
    pub sd_eval: f64,
    pub mean_train: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub task: ToyTaskSpec,
    pub train: TrainConfig,
    pub channels: usize,
    pub runs: Vec<ExperimentResult>,
    pub summary: Vec<KindSummary>,
}

/// Trains every kind on seeds `base..base + n_seeds` (task and init seeds
/// both offset by the run index) under an identical budget.
pub fn compare(
    kinds: &[UpsamplerKind],
    task: &ToyTaskSpec,
    cfg: &TrainConfig,
    channels: usize,
    n_seeds: usize,
) -> Result<CompareReport> {
    if n_seeds == 0 {
        return Err(config_err!("n_seeds must be >= 1"));
    }
    let jobs: Vec<(UpsamplerKind, u64)> = kinds
        .iter()
        .flat_map(|&k| (0..n_seeds as u64).map(move |i| (k, i)))
        .collect();
    let runs = exec::map_range(jobs.len(), |j| {
        let (kind, i) = jobs[j];
        let task = ToyTaskSpec {
            seed: task.seed + i,
            ..*task
        };
        let cfg = TrainConfig {
            seed: cfg.seed + i,
            ..*cfg
        };
        run_experiment(kind, channels, &task, &cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    CompareReport::from_runs(*task, *cfg, channels, runs)
}

impl CompareReport {
    /// Summarizes finished runs per kind, in order of first appearance.
    pub fn from_runs(task: ToyTaskSpec, train: TrainConfig, channels: usize, runs: Vec<ExperimentResult>) -> Result<Self> {
        let mut summary: Vec<KindSummary> = Vec::new();
        for run in &runs {
            let kind = run.kind;
            if summary.iter().any(|s| s.kind.name() == kind.name()) {
                continue;
            }
            let same: Vec<&ExperimentResult> = runs.iter().filter(|r| r.kind.name() == kind.name()).collect();
            let n = same.len() as f64;
            let mean = same.iter().map(|r| r.final_eval()).sum::<f64>() / n;
            let sd = if same.len() > 1 {
                (same.iter().map(|r| (r.final_eval() - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            summary.push(KindSummary {
                kind,
                mean_eval: mean,
                sd_eval: sd,
                mean_train: same.iter().map(|r| r.final_train()).sum::<f64>() / n,
                params: ToyModel::init(kind, channels, &mut Rng::new(0))?.upsampler.param_count(),
            });
        }
        Ok(Self {
            task,
            train,
            channels,
            runs,
            summary,
        })
    }

    pub fn config_header(&self) -> String {
        let t = &self.task;
        let c = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "# toy benchmark (desk-scale analogue; not a reproduction of published benchmarks)");
        for (k, v) in [
            ("image_size", t.image_size.to_string()),
            ("n_train", t.n_train.to_string()),
            ("n_eval", t.n_eval.to_string()),
            ("pattern", t.pattern.to_string()),
            ("task_seed", t.seed.to_string()),
            ("noise_std", t.noise_std.to_string()),
            ("channels", self.channels.to_string()),
            ("lr", c.lr.to_string()),
            ("momentum", c.momentum.to_string()),
            ("epochs", c.epochs.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("seed", c.seed.to_string()),
        ] {
            let _ = writeln!(s, "# {k}={v}");
        }
        s
    }

    /// Per-epoch results with the configuration echoed as comments.
    pub fn to_csv(&self) -> String {
        let mut s = self.config_header();
        s.push_str("kind,seed,epoch,train_loss,eval_loss\n");
        for r in &self.runs {
            for (e, (tl, el)) in r.train_losses.iter().zip(&r.eval_losses).enumerate() {
                let _ = writeln!(s, "{},{},{},{:.9e},{:.9e}", r.kind.name(), r.seed, e + 1, tl, el);
            }
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>8} {:>14} {:>12} {:>14}", "kind", "params", "eval_mse_mean", "eval_mse_sd", "train_mse_mean");
        for k in &self.summary {
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>14.6e} {:>12.3e} {:>14.6e}",
                k.kind.name(),
                k.params,
                k.mean_eval,
                k.sd_eval,
                k.mean_train
            );
        }
        s
    }

    pub fn summary_for(&self, name: &str) -> Option<&KindSummary> {
        self.summary.iter().find(|s| s.kind.name() == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_task(seed: u64) -> ToyTaskSpec {
        ToyTaskSpec {
            image_size: 8,
            n_train: 8,
            n_eval: 4,
            pattern: Pattern::Rectangles,
            seed,
            noise_std: 0.02,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.02,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_target_pools_to_same_constant() {
        let mut rng = Rng::new(0);
        let s = make_sample(Tensor::full(&[1, 6, 6], 0.37), 0.0, &mut rng).unwrap();
        assert_eq!(s.input.dims(), &[1, 3, 3]);
        assert!(s.input.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn generation_is_deterministic() {
        for pattern in [Pattern::Rectangles, Pattern::Voronoi] {
            let spec = ToyTaskSpec { pattern, ..tiny_task(9) };
            assert_eq!(gen_task(&spec).unwrap(), gen_task(&spec).unwrap());
        }
        assert_ne!(gen_task(&tiny_task(1)).unwrap(), gen_task(&tiny_task(2)).unwrap());
    }

    #[test]
    fn pooling_preserves_mean_without_noise() {
        let spec = ToyTaskSpec {
            noise_std: 0.0,
            image_size: 32,
            ..tiny_task(4)
        };
        let data = gen_task(&spec).unwrap();
        for s in data.train.iter().chain(&data.eval) {
            assert_eq!(s.input.dims(), &[1, 16, 16]);
            let mi = s.input.sum() / s.input.len() as f64;
            let mt = s.target.sum() / s.target.len() as f64;
            assert!((mi - mt).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_are_piecewise_constant_in_unit_range() {
        let data = gen_task(&ToyTaskSpec { image_size: 32, ..tiny_task(3) }).unwrap();
        for s in &data.train {
            let (lo, hi) = s.target.min_max();
            assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            let mut vals: Vec<f64> = s.target.data().to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            assert!(vals.len() <= 11);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ToyTaskSpec { image_size: 7, ..tiny_task(0) }.validate().is_err());
        assert!(ToyTaskSpec { n_eval: 0, ..tiny_task(0) }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let data = gen_task(&tiny_task(0)).unwrap();
        let mut model = ToyModel::init(UpsamplerKind::Bilinear, 4, &mut Rng::new(0)).unwrap();
        let before = model.clone();
        let r = train(&mut model, &data, &TrainConfig { lr: 0.0, ..tiny_cfg() }).unwrap();
        assert_eq!(model, before);
        assert!(r.eval_losses.windows(2).all(|w| w[0] == w[1]));
        // Shuffling changes only the summation order.
        assert!(r.train_losses.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * w[0]));
    }

    #[test]
    fn head_bias_only_descends_monotonically() {
        let data = gen_task(&tiny_task(5)).unwrap();
        let mut model = ToyModel::init(UpsamplerKind::Nearest, 4, &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            momentum: 0.0,
            epochs: 6,
            batch_size: 8,
            scope: TrainScope::HeadBias,
            ..tiny_cfg()
        };
        let r = train(&mut model, &data, &cfg).unwrap();
        assert!(r.train_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", r.train_losses);
    }

    #[test]
    fn named_tensors_cover_every_parameter() {
        for kind in UpsamplerKind::all() {
            let kind = match kind {
                UpsamplerKind::Carafe(_) => UpsamplerKind::Carafe(toy_carafe_settings(4)),
                k => k,
            };
            let model = ToyModel::init(kind, 4, &mut Rng::new(0)).unwrap();
            let total: usize = model.named_tensors().iter().map(|(_, t)| t.len()).sum();
            assert_eq!(total, model.param_count(), "{kind}");
        }
        let kind = UpsamplerKind::Carafe(toy_carafe_settings(4));
        let model = ToyModel::init(kind, 4, &mut Rng::new(0)).unwrap();
        let cfg = model.carafe_config().unwrap();
        let params = crate::CarafeParams::from_named_tensors(cfg, &model.named_tensors()).unwrap();
        match &model.upsampler {
            Upsampler::Carafe { params: p, .. } => assert_eq!(&params, p),
            _ => unreachable!(),
        }
    }

    #[test]
    fn one_step_reaches_the_encoder() {
        let data = gen_task(&ToyTaskSpec { n_train: 4, ..tiny_task(2) }).unwrap();
        let kind = UpsamplerKind::Carafe(toy_carafe_settings(4));
        let mut model = ToyModel::init(kind, 4, &mut Rng::new(3)).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..tiny_cfg()
        };
        train(&mut model, &data, &cfg).unwrap();
        let enc = |m: &ToyModel| match &m.upsampler {
            Upsampler::Carafe { params, .. } => (params.encoder.clone(), params.compressor.clone().unwrap()),
            _ => unreachable!(),
        };
        let (e0, c0) = enc(&before);
        let (e1, c1) = enc(&model);
        assert!(e0.weight.max_abs_diff(&e1.weight).unwrap() > 0.0);
        assert!(c0.weight.max_abs_diff(&c1.weight).unwrap() > 0.0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let task = ToyTaskSpec { n_train: 16, ..tiny_task(7) };
        let cfg = TrainConfig { epochs: 4, ..tiny_cfg() };
        let kind = UpsamplerKind::Carafe(CarafeSettings::default());
        let a = run_experiment(kind, 4, &task, &cfg).unwrap();
        let b = run_experiment(kind, 4, &task, &cfg).unwrap();
        assert_eq!(a.train_losses, b.train_losses);
        assert_eq!(a.eval_losses, b.eval_losses);
        assert!(a.final_train() < a.train_losses[0]);
        assert!(a.train_losses.iter().chain(&a.eval_losses).all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = gen_task(&tiny_task(0)).unwrap();
        let mut model = ToyModel::init(UpsamplerKind::NearestConv, 4, &mut Rng::new(0)).unwrap();
        let err = train(&mut model, &data, &TrainConfig { lr: 1e6, ..tiny_cfg() }).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { epoch } if epoch >= 1), "{err:?}");
    }

    #[test]
    fn compare_nearest_only_and_duplicate_kinds() {
        let task = tiny_task(1);
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
        let kinds = [UpsamplerKind::Nearest, UpsamplerKind::Nearest];
        let rep = compare(&kinds, &task, &cfg, 4, 2).unwrap();
        assert_eq!(rep.runs.len(), 4);
        assert_eq!(rep.runs[0].eval_losses, rep.runs[2].eval_losses);
        assert_eq!(rep.runs[1].eval_losses, rep.runs[3].eval_losses);
        assert_eq!(rep.summary.len(), 1);
        assert_eq!(rep.summary[0].params, 0);
        assert!(rep.summary[0].mean_eval.is_finite());

        let csv = rep.to_csv();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], "kind,seed,epoch,train_loss,eval_loss");
        assert_eq!(rows.len(), 1 + 4 * 2);
        assert!(csv.contains("# epochs=2\n"));
        assert!(rows[1].starts_with("nearest,0,1,"));
    }
}
