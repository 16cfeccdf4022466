//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance suite. Every checker builds a small seeded instance and returns
//! the max relative error between reverse-mode and central differences.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use colnerf::ccvi::{Ccvi, CcviConfig};
use colnerf::encoder::{Encoder, VolumeVar};
use colnerf::field::{FieldConfig, PosEncoding, RadianceNet, RadianceOut};
use colnerf::losses::{loss_appearance, loss_geometry, RayPair};
use colnerf::numerics::{relative_error, Graph, ParamId, ParamStore, Tensor, Var};
use colnerf::render::composite_graph;
use colnerf::scene::{make_scene, Image, SceneDataset, SceneSpec};
use colnerf::trainer::{Ablation, Model, TrainConfig, Trainer};

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// `sum(x * r)` for a fixed random `r`, so every output element matters.
fn probe(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let r = g.constant_from(&shape, random_vec(rng, n, -1.0, 1.0));
    let p = g.mul(x, r).unwrap();
    g.sum_all(p)
}

/// Compares gradients of `build` with respect to every tensor in `store`.
pub fn check_store(store: &mut ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut analytic = Vec::new();
    for &id in &ids {
        match g.param_var(id).and_then(|v| g.grad(v)) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat(0.0).take(store.get(id).len())),
        }
    }
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, store);
        g.item(l)
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in &ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric, FLOOR)
}

pub fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(w, h, random_vec(rng, w * h * 3, 0.0, 1.0)).unwrap()
}

pub fn gradcheck_encoder(seed: u64) -> f64 {
    let mut r = rng(seed);
    let channels = [2, 4][seed as usize % 2];
    let (w, h) = (r.gen_range(4..8), r.gen_range(4..8));
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, channels, &mut r);
    let img = random_image(w, h, &mut r);
    let probe_seed = r.gen();
    check_store(&mut store, |g, s| {
        let v = enc.encode(g, s, &img).unwrap();
        probe(g, v.var, &mut rng(probe_seed))
    })
}

pub fn gradcheck_ccvi(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = 3;
    let views = 2 + seed as usize % 2;
    let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
    let config = CcviConfig { channels: d, key_dim: d, ffn_dim: 2 * d, patch: 2, band: 1 };
    let mut store = ParamStore::new();
    let ccvi = Ccvi::new(&mut store, config, &mut r).unwrap();
    let inputs: Vec<ParamId> = (0..views)
        .map(|k| store.insert(format!("input.{k}"), Tensor::new(&[h * w, d], random_vec(&mut r, h * w * d, -1.0, 1.0)).unwrap()))
        .collect();
    let probe_seed = r.gen();
    check_store(&mut store, |g, s| {
        let vols: Vec<VolumeVar> = inputs.iter().map(|&id| VolumeVar { var: g.param(s, id), height: h, width: w, channels: d }).collect();
        let out = ccvi.forward(g, s, &vols).unwrap();
        let mut pr = rng(probe_seed);
        let mut acc = probe(g, out[0].var, &mut pr);
        for v in &out[1..] {
            let p = probe(g, v.var, &mut pr);
            acc = g.add(acc, p).unwrap();
        }
        acc
    })
}

pub fn gradcheck_radiance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let views = 1 + seed as usize % 3;
    let fd = 3;
    let points = 4;
    let config = FieldConfig { width: 6, blocks: 3, merge_after: 2, encoding: PosEncoding { frequencies: 2, omega: 1.5 } };
    let mut store = ParamStore::new();
    let net = RadianceNet::new(&mut store, "field.", config, fd, &mut r).unwrap();
    let in_dim = config.encoding.dim() + 3;
    let inputs = store.insert("input.x", Tensor::new(&[points, in_dim], random_vec(&mut r, points * in_dim, -1.0, 1.0)).unwrap());
    let feats = store.insert("input.f", Tensor::new(&[views * points, fd], random_vec(&mut r, views * points * fd, -1.0, 1.0)).unwrap());
    let probe_seed = r.gen();
    check_store(&mut store, |g, s| {
        let (x, f) = (g.param(s, inputs), g.param(s, feats));
        let out = net.forward(g, s, x, f, views).unwrap();
        let mut pr = rng(probe_seed);
        let a = probe(g, out.rgb, &mut pr);
        let b = probe(g, out.sigma, &mut pr);
        g.add(a, b).unwrap()
    })
}

pub fn gradcheck_composite(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rays, samples) = (3, r.gen_range(2..7));
    let n = rays * samples;
    let mut t = Vec::with_capacity(n);
    for _ in 0..rays {
        let mut ts = random_vec(&mut r, samples, 2.0, 6.0);
        ts.sort_by(f64::total_cmp);
        t.extend(ts);
    }
    let delta = random_vec(&mut r, n, 0.05, 0.5);
    let bg = [r.gen(), r.gen(), r.gen()];
    let mut store = ParamStore::new();
    let sig = store.insert("sigma", Tensor::new(&[n], random_vec(&mut r, n, -2.0, 3.0)).unwrap());
    let rgb = store.insert("rgb", Tensor::new(&[n, 3], random_vec(&mut r, n * 3, -2.0, 2.0)).unwrap());
    let probe_seed = r.gen();
    check_store(&mut store, |g, s| {
        let raw_s = g.param(s, sig);
        let raw_c = g.param(s, rgb);
        let out = RadianceOut { sigma: g.softplus(raw_s), rgb: g.sigmoid(raw_c) };
        let c = composite_graph(g, out, t.clone(), delta.clone(), rays, samples, bg).unwrap();
        let mut pr = rng(probe_seed);
        let mut acc = probe(g, c.color, &mut pr);
        for v in [c.depth, c.opacity, c.density] {
            let p = probe(g, v, &mut pr);
            acc = g.add(acc, p).unwrap();
        }
        acc
    })
}

pub fn gradcheck_loss_geometry(seed: u64) -> f64 {
    let mut r = rng(seed);
    let rays = 8;
    let density: Vec<f64> = (0..rays).map(|_| if r.gen_bool(0.25) { r.gen_range(0.0..0.09) } else { r.gen_range(0.2..2.0) }).collect();
    let pairs: Vec<RayPair> = (0..rays / 2).map(|k| RayPair { reference: k, adjacent: rays / 2 + k }).collect();
    let mut store = ParamStore::new();
    let depth = store.insert("depth", Tensor::new(&[rays], random_vec(&mut r, rays, 2.5, 5.5)).unwrap());
    check_store(&mut store, |g, s| {
        let d = g.param(s, depth);
        loss_geometry(g, d, &density, &pairs, 0.1).unwrap().0
    })
}

pub fn gradcheck_loss_appearance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rays, samples) = (3, 4);
    let n = rays * samples;
    let labels: Vec<[f64; 3]> = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let valid: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
    let mut store = ParamStore::new();
    let logits = store.insert("rgb", Tensor::new(&[n, 3], random_vec(&mut r, n * 3, -2.0, 2.0)).unwrap());
    check_store(&mut store, |g, s| {
        let raw = g.param(s, logits);
        let rgb = g.sigmoid(raw);
        loss_appearance(g, rgb, samples, &labels, &valid, 1e-3).unwrap()
    })
}

pub fn tiny_scene(seed: u64) -> SceneDataset {
    make_scene(&SceneSpec::tri_sphere(6, 8, seed)).unwrap()
}

/// Full weighted training loss of a tiny model, differentiated with respect
/// to every model parameter. Fine sampling is off: importance-sample
/// positions are treated as constants by the backward pass, which finite
/// differences cannot reproduce.
pub fn gradcheck_end_to_end(seed: u64, scene: &SceneDataset) -> f64 {
    let config = TrainConfig {
        seed,
        channels: 2,
        mlp_width: 4,
        mlp_blocks: 2,
        merge_after: 1,
        pe_frequencies: 2,
        n_coarse: 6,
        n_fine: 0,
        rays_per_iter: 4,
        random_rays: 3,
        reference_rays: 1,
        neighbor_rays: 1,
        max_offset: 2,
        batch_scenes: Some(1),
        patch: 2,
        band: 1,
        lambda_geo: 0.3,
        lambda_app: 0.2,
        ablation: Ablation::Full,
        ..Default::default()
    };
    let trainer = Trainer::new(config).unwrap();
    let mut store = trainer.model.store.clone();
    let scenes = std::slice::from_ref(scene);
    check_store(&mut store, |g, s| {
        let model = Model { store: s.clone(), ..trainer.model.clone() };
        let t = Trainer { config: trainer.config.clone(), model, adam: trainer.adam.clone(), iteration: seed };
        t.loss_graph(g, scenes).unwrap().0
    })
}
