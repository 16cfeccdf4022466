//! Model assembly, the training loop, evaluation and checkpoints.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccvi::{Ccvi, CcviConfig};
use crate::encoder::{check_extents, Encoder, VolumeVar};
use crate::error::{Error, Result};
use crate::field::{network_inputs, FieldConfig, PosEncoding, RadianceNet, RadianceOut, ViewFeatures};
use crate::geometry::{adjacent_ray, ray_for_pixel, Camera, PixelCoord, Ray, Vec3};
use crate::losses::{build_pseudo_label, loss_appearance, loss_geometry, loss_reconstruction, loss_total, LossWeights, RayPair};
use crate::metrics::{view_metrics, MetricsReport};
use crate::numerics::{checkpoint, Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::render::{ray_rng, render_rays, Jitter, RadianceModel, SamplingConfig};
use crate::scene::{Image, SceneDataset, Split};

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Raw encoder features averaged across views, no regularizers.
    Baseline,
    Vi,
    ViGeo,
    ViApp,
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Baseline, Ablation::Vi, Ablation::ViGeo, Ablation::ViApp, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Vi => "vi",
            Ablation::ViGeo => "vi-geo",
            Ablation::ViApp => "vi-app",
            Ablation::Full => "full",
        }
    }

    pub fn uses_ccvi(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn uses_geometry(self) -> bool {
        matches!(self, Ablation::ViGeo | Ablation::Full)
    }

    pub fn uses_appearance(self) -> bool {
        matches!(self, Ablation::ViApp | Ablation::Full)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?} (expected baseline, vi, vi-geo, vi-app or full)")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub learning_rate: f64,
    pub rays_per_iter: usize,
    pub random_rays: usize,
    /// The last `reference_rays` of the random rays get an adjacent partner.
    pub reference_rays: usize,
    pub neighbor_rays: usize,
    pub max_offset: usize,
    /// Scenes per iteration; defaults to 3 for up to six source views, else 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_scenes: Option<usize>,
    pub n_source_views: usize,
    pub channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    pub patch: usize,
    pub band: usize,
    pub mlp_width: usize,
    pub mlp_blocks: usize,
    pub merge_after: usize,
    pub pe_frequencies: usize,
    pub pe_omega: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub lambda_geo: f64,
    pub lambda_app: f64,
    pub tau: f64,
    pub eps_color: f64,
    pub grad_clip: f64,
    pub ablation: Ablation,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_views: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub render_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            learning_rate: 1e-4,
            rays_per_iter: 128,
            random_rays: 112,
            reference_rays: 16,
            neighbor_rays: 16,
            max_offset: 7,
            batch_scenes: None,
            n_source_views: 3,
            channels: 32,
            key_dim: None,
            ffn_dim: None,
            patch: 5,
            band: 3,
            mlp_width: 64,
            mlp_blocks: 5,
            merge_after: 3,
            pe_frequencies: 6,
            pe_omega: 1.5,
            n_coarse: 32,
            n_fine: 32,
            lambda_geo: 1e-4,
            lambda_app: 2e-4,
            tau: 0.1,
            eps_color: 1e-3,
            grad_clip: 10.0,
            ablation: Ablation::Full,
            eval_every: 250,
            eval_views: 4,
            checkpoint_every: 0,
            render_chunk: 512,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn batch_scenes(&self) -> usize {
        self.batch_scenes.unwrap_or(if self.n_source_views <= 6 { 3 } else { 2 })
    }

    pub fn ccvi(&self) -> CcviConfig {
        CcviConfig {
            channels: self.channels,
            key_dim: self.key_dim.unwrap_or(self.channels),
            ffn_dim: self.ffn_dim.unwrap_or(2 * self.channels),
            patch: self.patch,
            band: self.band,
        }
    }

    pub fn field(&self) -> FieldConfig {
        FieldConfig {
            width: self.mlp_width,
            blocks: self.mlp_blocks,
            merge_after: self.merge_after,
            encoding: PosEncoding { frequencies: self.pe_frequencies, omega: self.pe_omega },
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { n_coarse: self.n_coarse, n_fine: self.n_fine, jitter: Jitter::Random }
    }

    /// Loss weights with the regularizers this ablation leaves out set to zero.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_geo: if self.ablation.uses_geometry() { self.lambda_geo } else { 0.0 },
            lambda_app: if self.ablation.uses_appearance() { self.lambda_app } else { 0.0 },
            tau: self.tau,
            eps_color: self.eps_color,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.random_rays + self.neighbor_rays != self.rays_per_iter {
            return bad(format!(
                "random_rays ({}) + neighbor_rays ({}) must equal rays_per_iter ({})",
                self.random_rays, self.neighbor_rays, self.rays_per_iter
            ));
        }
        if self.reference_rays != self.neighbor_rays || self.reference_rays > self.random_rays {
            return bad(format!(
                "reference_rays ({}) must equal neighbor_rays ({}) and not exceed random_rays ({})",
                self.reference_rays, self.neighbor_rays, self.random_rays
            ));
        }
        if self.random_rays == 0 || self.n_source_views == 0 || self.channels == 0 || self.n_coarse == 0 {
            return bad("random_rays, n_source_views, channels and n_coarse must be >= 1".into());
        }
        if self.reference_rays > 0 && self.max_offset == 0 {
            return bad("max_offset must be >= 1 when pairs are used".into());
        }
        if self.batch_scenes() == 0 || self.render_chunk == 0 {
            return bad("batch_scenes and render_chunk must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning_rate must be >= 0 and grad_clip > 0".into());
        }
        self.ccvi().validate()?;
        self.loss_weights().validate()?;
        Ok(())
    }
}

/// Encoder, optional CCVI block and the coarse and fine radiance networks.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub ccvi: Option<Ccvi>,
    pub coarse: RadianceNet,
    pub fine: RadianceNet,
    pub n_source_views: usize,
}

impl Model {
    /// Parameters are drawn from a generator seeded with `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.channels, &mut rng);
        let ccvi = if config.ablation.uses_ccvi() { Some(Ccvi::new(&mut store, config.ccvi(), &mut rng)?) } else { None };
        let coarse = RadianceNet::new(&mut store, "field.coarse.", config.field(), config.channels, &mut rng)?;
        let fine = RadianceNet::new(&mut store, "field.fine.", config.field(), config.channels, &mut rng)?;
        Ok(Self { store, encoder, ccvi, coarse, fine, n_source_views: config.n_source_views })
    }

    /// Encodes the source images and, with CCVI enabled, fuses them.
    pub fn volumes(&self, g: &mut Graph, images: &[&Image]) -> Result<Vec<VolumeVar>> {
        let raw = images.iter().map(|im| self.encoder.encode(g, &self.store, im)).collect::<Result<Vec<_>>>()?;
        match &self.ccvi {
            Some(c) => c.forward(g, &self.store, &raw),
            None => Ok(raw),
        }
    }
}

/// The source views of a scene that condition the model.
pub fn source_views(dataset: &SceneDataset, n: usize) -> Result<Vec<usize>> {
    let views = dataset.views_in(Split::Source);
    if views.len() < n {
        return Err(Error::InvalidArgument(format!("scene has {} source views, {n} required", views.len())));
    }
    Ok(views[..n].to_vec())
}

/// Fused volumes of one scene in a graph, ready for lookups.
pub struct SceneContext<'a> {
    pub cameras: Vec<Camera>,
    pub images: Vec<&'a Image>,
    pub stacked: Var,
    pub height: usize,
    pub width: usize,
}

impl<'a> SceneContext<'a> {
    pub fn new(g: &mut Graph, model: &Model, dataset: &'a SceneDataset) -> Result<Self> {
        let views = source_views(dataset, model.n_source_views)?;
        for &v in &views {
            check_extents(&dataset.images[v], dataset.cameras[v].width, dataset.cameras[v].height)?;
        }
        let images: Vec<&Image> = views.iter().map(|&v| &dataset.images[v]).collect();
        let cameras: Vec<Camera> = views.iter().map(|&v| dataset.cameras[v].clone()).collect();
        let vols = model.volumes(g, &images)?;
        let vars: Vec<Var> = vols.iter().map(|v| v.var).collect();
        let stacked = if vars.len() == 1 { vars[0] } else { g.concat(&vars, 0)? };
        Ok(Self { cameras, images, stacked, height: vols[0].height, width: vols[0].width })
    }

}

/// The trained networks queried through one scene's fused volumes.
pub struct NeuralField<'m, 'c> {
    pub model: &'m Model,
    pub features: ViewFeatures<'c>,
}

impl RadianceModel for NeuralField<'_, '_> {
    fn radiance(&self, g: &mut Graph, points: &[Vec3], directions: &[Vec3], fine: bool) -> Result<RadianceOut> {
        let net = if fine { &self.model.fine } else { &self.model.coarse };
        let enc = net.config.encoding;
        let x = g.constant_from(&[points.len(), enc.dim() + 3], network_inputs(&enc, points, directions));
        let (f, _) = self.features.lookup(g, points)?;
        net.forward(g, &self.model.store, x, f, self.features.views())
    }
}

impl<'a> SceneContext<'a> {
    pub fn field<'m, 'c>(&'c self, model: &'m Model) -> NeuralField<'m, 'c> {
        let channels = model.encoder.channels;
        NeuralField {
            model,
            features: ViewFeatures { stacked: self.stacked, cameras: &self.cameras, height: self.height, width: self.width, channels },
        }
    }
}

/// Rays of one training iteration for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub view: usize,
    pub rays: Vec<Ray>,
    pub pixels: Vec<(usize, usize)>,
    /// Ground-truth colors, `[rays * 3]`.
    pub colors: Vec<f64>,
    pub pairs: Vec<RayPair>,
}

/// `random_rays` uniformly random pixels of a random target view, the last
/// `reference_rays` of which get an adjacent ray within `max_offset` pixels.
pub fn sample_ray_batch(dataset: &SceneDataset, config: &TrainConfig, rng: &mut impl Rng) -> Result<RayBatch> {
    let targets = dataset.views_in(Split::Target);
    if targets.is_empty() {
        return Err(Error::InvalidArgument("scene has no target views".into()));
    }
    let view = targets[rng.gen_range(0..targets.len())];
    let cam = &dataset.cameras[view];
    let img = &dataset.images[view];
    let mut batch = RayBatch { view, rays: Vec::new(), pixels: Vec::new(), colors: Vec::new(), pairs: Vec::new() };
    for _ in 0..config.random_rays {
        let p = (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height));
        batch.rays.push(ray_for_pixel(cam, PixelCoord::new(p.0 as f64, p.1 as f64), dataset.near, dataset.far));
        batch.pixels.push(p);
        batch.colors.extend_from_slice(&img.pixel(p.0, p.1));
    }
    let first_ref = config.random_rays - config.reference_rays;
    for k in 0..config.reference_rays {
        let r = first_ref + k;
        let (ray, p) = adjacent_ray(&batch.rays[r], batch.pixels[r], cam, config.max_offset, rng)?;
        batch.pairs.push(RayPair { reference: r, adjacent: batch.rays.len() });
        batch.rays.push(ray);
        batch.pixels.push(p);
        batch.colors.extend_from_slice(&img.pixel(p.0, p.1));
    }
    Ok(batch)
}

/// Scene indices used at `iteration`, drawn uniformly with replacement.
pub fn scene_schedule(seed: u64, iteration: u64, scenes: usize, batch: usize) -> Vec<usize> {
    let mut rng = ray_rng(seed ^ 0x5ce7_e5ce_7e5c_e7e5, iteration);
    (0..batch).map(|_| rng.gen_range(0..scenes)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub rec: f64,
    pub geo: f64,
    pub app: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub losses: StepLosses,
    pub psnr_eval: Option<f64>,
    pub wallclock_s: f64,
}

pub const LOG_HEADER: &str = "iter,loss_rec,loss_geo,loss_app,loss_total,psnr_eval,wallclock_s";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        let psnr = self.psnr_eval.map(|p| format!("{p:.4}")).unwrap_or_default();
        format!("{},{:.8e},{:.8e},{:.8e},{:.8e},{psnr},{:.3}", self.iteration, l.rec, l.geo, l.app, l.total, self.wallclock_s)
    }
}

/// Graph nodes of the loss terms for one scene.
struct SceneLoss {
    rec: Var,
    geo: Var,
    app: Var,
}

/// Rendered image and depth map of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub image: Image,
    pub depth: Vec<f64>,
}

/// Model parameters, optimizer state and position in training.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::new(&config)?;
        let adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() }, &model.store);
        Ok(Self { config, model, adam, iteration: 0 })
    }

    fn scene_loss(&self, g: &mut Graph, dataset: &SceneDataset, slot: usize, rng: &mut ChaCha8Rng) -> Result<SceneLoss> {
        let ctx = SceneContext::new(g, &self.model, dataset)?;
        let batch = sample_ray_batch(dataset, &self.config, rng)?;
        let base = (self.iteration << 24) | ((slot as u64) << 16);
        let ids: Vec<u64> = (0..batch.rays.len() as u64).map(|i| base | i).collect();
        let field = ctx.field(&self.model);
        let out = render_rays(g, &batch.rays, &ids, &field, &self.config.sampling(), self.config.seed, dataset.background)?;
        let rc = loss_reconstruction(g, out.coarse.color, &batch.colors)?;
        let rec = match &out.fine {
            Some(f) => {
                let rf = loss_reconstruction(g, f.color, &batch.colors)?;
                g.add(rc, rf)?
            }
            None => rc,
        };
        let last = out.last();
        let density = g.value(last.density).to_vec();
        let (geo, _) = loss_geometry(g, last.depth, &density, &batch.pairs, self.config.tau)?;
        let points: Vec<Vec3> = batch
            .rays
            .iter()
            .enumerate()
            .flat_map(|(r, ray)| last.t[r * last.samples..(r + 1) * last.samples].iter().map(move |&t| ray.at(t)))
            .collect();
        let (labels, valid) = build_pseudo_label(&points, &ctx.images, &ctx.cameras)?;
        let app = loss_appearance(g, last.rgb, last.samples, &labels, &valid, self.config.eps_color)?;
        Ok(SceneLoss { rec, geo, app })
    }

    /// Builds the weighted training loss for the current iteration without
    /// touching the parameters. Deterministic given `(seed, iteration)`.
    pub fn loss_graph(&self, g: &mut Graph, scenes: &[SceneDataset]) -> Result<(Var, StepLosses)> {
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one scene".into()));
        }
        let schedule = scene_schedule(self.config.seed, self.iteration, scenes.len(), self.config.batch_scenes());
        let mut rng = ray_rng(self.config.seed ^ 0xba7c_4ba7_c4ba_7c4b, self.iteration);
        let mut terms = Vec::with_capacity(schedule.len());
        for (slot, &s) in schedule.iter().enumerate() {
            terms.push(self.scene_loss(g, &scenes[s], slot, &mut rng)?);
        }
        let sum = |g: &mut Graph, vs: Vec<Var>| -> Result<Var> {
            let mut acc = vs[0];
            for &v in &vs[1..] {
                acc = g.add(acc, v)?;
            }
            Ok(acc)
        };
        let rec = sum(g, terms.iter().map(|t| t.rec).collect())?;
        let geo = sum(g, terms.iter().map(|t| t.geo).collect())?;
        let app = sum(g, terms.iter().map(|t| t.app).collect())?;
        let weights = self.config.loss_weights();
        let total = loss_total(g, rec, geo, app, &weights)?;
        let losses = StepLosses { rec: g.item(rec), geo: g.item(geo), app: g.item(app), total: g.item(total), grad_norm: 0.0 };
        Ok((total, losses))
    }

    /// One optimization step on the scenes scheduled for the current iteration.
    pub fn step(&mut self, scenes: &[SceneDataset]) -> Result<StepLosses> {
        let mut g = Graph::new();
        let (total, mut losses) = self.loss_graph(&mut g, scenes)?;
        for (name, v) in [("loss_rec", losses.rec), ("loss_geo", losses.geo), ("loss_app", losses.app), ("loss_total", losses.total)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.into(), iteration: self.iteration });
            }
        }
        g.backward(total)?;
        self.model.store.zero_grad();
        g.accumulate_param_grads(&mut self.model.store)?;
        losses.grad_norm = self.model.store.clip_grad_norm(self.config.grad_clip);
        if !losses.grad_norm.is_finite() {
            return Err(Error::NonFinite { term: "gradient".into(), iteration: self.iteration });
        }
        self.adam.step(&mut self.model.store)?;
        self.iteration += 1;
        Ok(losses)
    }

    /// Trains until `config.iterations`, evaluating on `eval` (default: the
    /// first scene) and checkpointing to `checkpoint_path` at the configured
    /// cadences. Each step is reported through `log`.
    pub fn train(
        &mut self,
        scenes: &[SceneDataset],
        eval: Option<&SceneDataset>,
        checkpoint_path: Option<&Path>,
        mut log: impl FnMut(&LogRow) -> Result<()>,
    ) -> Result<()> {
        let start = Instant::now();
        let eval_scene = eval.or(scenes.first());
        while self.iteration < self.config.iterations {
            let losses = self.step(scenes)?;
            let it = self.iteration;
            let due = |every: u64| every > 0 && (it % every == 0 || it == self.config.iterations);
            let psnr_eval = match eval_scene {
                Some(s) if due(self.config.eval_every) => Some(self.evaluate(s, self.config.eval_views)?.0.psnr),
                _ => None,
            };
            if let Some(p) = checkpoint_path {
                if due(self.config.checkpoint_every) {
                    self.save(p)?;
                }
            }
            log(&LogRow { iteration: it, losses, psnr_eval, wallclock_s: start.elapsed().as_secs_f64() })?;
        }
        if let Some(p) = checkpoint_path {
            self.save(p)?;
        }
        Ok(())
    }

    /// Continues optimization on `scene` alone for `iterations` more steps.
    pub fn fine_tune(&mut self, scene: &SceneDataset, iterations: u64, log: impl FnMut(&LogRow) -> Result<()>) -> Result<()> {
        self.config.iterations = self.iteration + iterations;
        self.train(std::slice::from_ref(scene), Some(scene), None, log)
    }

    /// Renders a view from `camera` given the conditioning views of `dataset`.
    /// Samples sit at bin midpoints, so the output depends only on the model.
    pub fn render_view(&self, dataset: &SceneDataset, camera: &Camera) -> Result<ViewRender> {
        render_view(&self.model, &self.config, dataset, camera)
    }

    /// Metrics over up to `max_views` held-out views (test split, or targets
    /// when there is none), plus the mean absolute depth error against the
    /// stored oracle depth where available.
    pub fn evaluate(&self, dataset: &SceneDataset, max_views: usize) -> Result<(MetricsReport, Option<f64>)> {
        evaluate(&self.model, &self.config, dataset, max_views)
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let store = &self.model.store;
        let mut entries: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), strip(t))).collect();
        for ((name, _), m) in store.iter().zip(&self.adam.first) {
            entries.push((format!("optim.m.{name}"), m.clone()));
        }
        for ((name, _), v) in store.iter().zip(&self.adam.second) {
            entries.push((format!("optim.v.{name}"), v.clone()));
        }
        entries.push(("optim.step".into(), Tensor::scalar(self.adam.step as f64)));
        entries.push(("train.iteration".into(), Tensor::scalar(self.iteration as f64)));
        entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    /// Restores a trainer from `path`; the architecture comes from `config`
    /// and must match the stored tensors.
    pub fn load(config: TrainConfig, path: &Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(config, entries)
    }

    pub fn from_entries(config: TrainConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut trainer = Self::new(config)?;
        let find = |name: &str| -> Result<&Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {name}")))
        };
        let mut saved = ParamStore::new();
        for (name, _) in trainer.model.store.iter() {
            saved.insert(name, find(name)?.clone());
        }
        trainer.model.store.load_from(&saved)?;
        let names: Vec<String> = trainer.model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            for (prefix, slot) in [("optim.m.", &mut trainer.adam.first[k]), ("optim.v.", &mut trainer.adam.second[k])] {
                let t = find(&format!("{prefix}{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Incompatible(format!("{prefix}{name}: shape {:?}, model has {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        trainer.adam.step = find("optim.step")?.item() as u64;
        trainer.iteration = find("train.iteration")?.item() as u64;
        let known = 3 * names.len() + 2;
        if entries.len() != known {
            let extra: Vec<&str> = entries
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| {
                    let base = n.strip_prefix("optim.m.").or_else(|| n.strip_prefix("optim.v.")).unwrap_or(n);
                    !names.iter().any(|m| m == base) && *n != "optim.step" && *n != "train.iteration"
                })
                .collect();
            return Err(Error::Incompatible(format!("checkpoint has tensors the model does not: {extra:?}")));
        }
        Ok(trainer)
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("shape already valid")
}

pub fn render_view(model: &Model, config: &TrainConfig, dataset: &SceneDataset, camera: &Camera) -> Result<ViewRender> {
    let mut g = Graph::new();
    let ctx = SceneContext::new(&mut g, model, dataset)?;
    let stacked = g.tensor(ctx.stacked);
    let sampling = SamplingConfig { jitter: Jitter::Midpoint, ..config.sampling() };
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|j| (0..w).map(move |i| (i, j))).collect();
    let mut image = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    for chunk in pixels.chunks(config.render_chunk) {
        let mut g = Graph::new();
        let features = ViewFeatures {
            stacked: g.constant(stacked.clone()),
            cameras: &ctx.cameras,
            height: ctx.height,
            width: ctx.width,
            channels: model.encoder.channels,
        };
        let field = NeuralField { model, features };
        let rays: Vec<Ray> =
            chunk.iter().map(|&(i, j)| ray_for_pixel(camera, PixelCoord::new(i as f64, j as f64), dataset.near, dataset.far)).collect();
        let ids: Vec<u64> = chunk.iter().map(|&(i, j)| (j * w + i) as u64).collect();
        let out = render_rays(&mut g, &rays, &ids, &field, &sampling, config.seed, dataset.background)?;
        image.extend(g.value(out.last().color).iter().map(|c| c.clamp(0.0, 1.0)));
        depth.extend_from_slice(g.value(out.last().depth));
    }
    Ok(ViewRender { image: Image::new(w, h, image)?, depth })
}

/// Held-out views: the test split, falling back to targets.
pub fn eval_views(dataset: &SceneDataset, max_views: usize) -> Vec<usize> {
    let mut views = dataset.views_in(Split::Test);
    if views.is_empty() {
        views = dataset.views_in(Split::Target);
    }
    views.truncate(max_views);
    views
}

pub fn evaluate(model: &Model, config: &TrainConfig, dataset: &SceneDataset, max_views: usize) -> Result<(MetricsReport, Option<f64>)> {
    let views = eval_views(dataset, max_views);
    if views.is_empty() {
        return Err(Error::InvalidArgument("scene has no held-out views to evaluate".into()));
    }
    let mut metrics = Vec::with_capacity(views.len());
    let (mut err, mut count) = (0.0, 0usize);
    for &v in &views {
        let r = render_view(model, config, dataset, &dataset.cameras[v])?;
        metrics.push(view_metrics(v, &r.image, &dataset.images[v])?);
        if let Some(truth) = &dataset.depths[v] {
            err += r.depth.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += truth.len();
        }
    }
    Ok((MetricsReport::new(metrics), (count > 0).then(|| err / count as f64)))
}
