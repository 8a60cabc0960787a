//! Low-rank residual triplets `ΔW = A·M·B` on the query, key and value projections.
//!
//! `A` (d × r_c2d, one per adapted layer, shared by q/k/v) and `B` (r_d2c × d, one
//! per projection) are random and frozen; they stay on the cloud. `M`
//! (r_c2d × r_d2c, one per projection) is the trainable private part and stays on
//! the device. Only `x·A` and `x·A·M` ever need to cross the network.

mod checkpoint;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal_matrix;
use crate::tensor::Matrix;

pub use checkpoint::{read_checkpoint, write_checkpoint, PrivateCheckpoint, CHECKPOINT_VERSION};

/// The three adapted projections, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Proj {
    Q = 0,
    K = 1,
    V = 2,
}

impl Proj {
    pub const ALL: [Proj; 3] = [Proj::Q, Proj::K, Proj::V];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub r_c2d: usize,
    pub r_d2c: usize,
    pub scale: f32,
    /// Sorted, duplicate-free layer indices.
    pub adapted_layers: Vec<usize>,
    pub trainable_m: bool,
    pub trainable_a: bool,
    pub trainable_b: bool,
    /// The tied embedding / LM head is trained alongside `M`.
    pub trainable_embedding: bool,
    pub init_seed: u64,
}

impl AdapterConfig {
    pub fn new(r_c2d: usize, r_d2c: usize, adapted_layers: Vec<usize>, init_seed: u64) -> Self {
        let mut layers = adapted_layers;
        layers.sort_unstable();
        layers.dedup();
        AdapterConfig {
            r_c2d,
            r_d2c,
            scale: 1.0,
            adapted_layers: layers,
            trainable_m: true,
            trainable_a: false,
            trainable_b: false,
            trainable_embedding: false,
            init_seed,
        }
    }

    /// Adapts every one of `n_layers` layers with equal ranks.
    pub fn all_layers(n_layers: usize, rank: usize, init_seed: u64) -> Self {
        Self::new(rank, rank, (0..n_layers).collect(), init_seed)
    }

    pub fn n_adapted(&self) -> usize {
        self.adapted_layers.len()
    }

    pub fn is_adapted(&self, layer: usize) -> bool {
        self.adapted_layers.binary_search(&layer).is_ok()
    }

    /// Hard errors for impossible configs; the returned strings are warnings
    /// for configs that are legal but defeat the point of low-rank transmission.
    pub fn validate(&self, n_layers: usize, d: usize) -> Result<Vec<String>> {
        if self.r_c2d == 0 || self.r_d2c == 0 {
            return Err(Error::Config("adapter ranks must be >= 1".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        if self.adapted_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("adapted_layers must be sorted and unique".into()));
        }
        if let Some(&l) = self.adapted_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!(
                "adapted layer {l} out of range for {n_layers} layers"
            )));
        }
        let mut warnings = Vec::new();
        for (name, r) in [("r_c2d", self.r_c2d), ("r_d2c", self.r_d2c)] {
            if r >= d {
                warnings.push(format!("{name}={r} is not below hidden size d={d}"));
            }
        }
        Ok(warnings)
    }

    /// Private parameters held on the device: `N'·3·r_c2d·r_d2c`.
    pub fn device_param_count(&self) -> usize {
        self.n_adapted() * 3 * self.r_c2d * self.r_d2c
    }

    /// Public parameters held on the cloud: `N'·(d·r_c2d + 3·r_d2c·d)`.
    pub fn cloud_param_count(&self, d: usize) -> usize {
        self.n_adapted() * (d * self.r_c2d + 3 * self.r_d2c * d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublicLayer {
    /// d × r_c2d, shared by q, k and v.
    pub a: Matrix,
    /// r_d2c × d each, indexed by [`Proj`].
    pub b: [Matrix; 3],
}

/// Frozen random encoder/decoder pairs. Never leave the cloud node.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudAdapterWeights {
    pub init_seed: u64,
    pub scale: f32,
    pub layers: BTreeMap<usize, PublicLayer>,
}

impl CloudAdapterWeights {
    /// No adapted layers at all.
    pub fn none() -> Self {
        CloudAdapterWeights {
            init_seed: 0,
            scale: 1.0,
            layers: BTreeMap::new(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&PublicLayer> {
        self.layers.get(&layer)
    }

    pub fn init(cfg: &AdapterConfig, d: usize) -> Self {
        Self::sample(cfg.init_seed, cfg.scale, &cfg.adapted_layers, d, cfg.r_c2d, cfg.r_d2c)
    }

    fn sample(seed: u64, scale: f32, layers: &[usize], d: usize, r_c2d: usize, r_d2c: usize) -> Self {
        let std_a = 1.0 / (d as f32).sqrt();
        let std_b = 1.0 / (r_d2c as f32).sqrt();
        let layers = layers
            .iter()
            .map(|&l| {
                let a = normal_matrix(seed, &format!("adapter.{l}.a"), d, r_c2d, std_a);
                let b = Proj::ALL.map(|p| {
                    normal_matrix(seed, &format!("adapter.{l}.b.{}", p.name()), r_d2c, d, std_b)
                });
                (l, PublicLayer { a, b })
            })
            .collect();
        CloudAdapterWeights {
            init_seed: seed,
            scale,
            layers,
        }
    }
}

/// Private trainable matrices. Never leave the device node.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceAdapterWeights {
    /// Seed of the public pair these were trained against.
    pub init_seed: u64,
    /// r_c2d × r_d2c each, indexed by [`Proj`].
    pub layers: BTreeMap<usize, [Matrix; 3]>,
}

impl DeviceAdapterWeights {
    pub fn zeros(cfg: &AdapterConfig) -> Self {
        let layers = cfg
            .adapted_layers
            .iter()
            .map(|&l| (l, Proj::ALL.map(|_| Matrix::zeros(cfg.r_c2d, cfg.r_d2c))))
            .collect();
        DeviceAdapterWeights {
            init_seed: cfg.init_seed,
            layers,
        }
    }

    pub fn layer(&self, layer: usize) -> Result<&[Matrix; 3]> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::internal(format!("no private adapter for layer {layer}")))
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers.values().flatten().all(Matrix::is_all_zero)
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().flatten().map(Matrix::len).sum()
    }
}

/// Fresh public/private pair: Gaussian `A`, `B` and all-zero `M`, so the adapted
/// model starts out identical to the base model. The warnings flag ranks that are
/// not below `d`.
pub fn init_adapters(
    cfg: &AdapterConfig,
    n_layers: usize,
    d: usize,
) -> Result<(CloudAdapterWeights, DeviceAdapterWeights, Vec<String>)> {
    let warnings = cfg.validate(n_layers, d)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((
        CloudAdapterWeights::init(cfg, d),
        DeviceAdapterWeights::zeros(cfg),
        warnings,
    ))
}

/// Redraws `A` and `B` with `new_seed`, keeping every shape. Any `M` trained
/// against the old pair no longer composes to the learned `ΔW`.
pub fn reinit_public(cloud: &CloudAdapterWeights, new_seed: u64) -> CloudAdapterWeights {
    let layers: Vec<usize> = cloud.layers.keys().copied().collect();
    let Some(first) = cloud.layers.values().next() else {
        return CloudAdapterWeights {
            init_seed: new_seed,
            ..cloud.clone()
        };
    };
    let (d, r_c2d) = first.a.shape();
    let r_d2c = first.b[0].rows();
    CloudAdapterWeights::sample(new_seed, cloud.scale, &layers, d, r_c2d, r_d2c)
}

/// `scale · ((x·A)·M)·B`, the residual the caller adds to `x·W`.
pub fn apply_adapter(x: &Matrix, a: &Matrix, m: &Matrix, b: &Matrix, scale: f32) -> Result<Matrix> {
    if x.cols() != a.rows() || a.cols() != m.rows() || m.cols() != b.rows() || b.cols() != x.cols() {
        return Err(Error::input(format!(
            "adapter shape chain broken: x{:?} A{:?} M{:?} B{:?}",
            x.shape(),
            a.shape(),
            m.shape(),
            b.shape()
        )));
    }
    let mut out = x.matmul(a)?.matmul(m)?.matmul(b)?;
    out.scale(scale);
    Ok(out)
}

/// The explicit `d × d` update `scale · A·M·B`.
pub fn delta_weight(a: &Matrix, m: &Matrix, b: &Matrix, scale: f32) -> Result<Matrix> {
    let mut w = a.matmul(m)?.matmul(b)?;
    w.scale(scale);
    Ok(w)
}

// ---- gradients ----------------------------------------------------------

/// Device half of the backward pass: given `u = x·A` and the gradient at each
/// `B` input, returns `grad(M_m) = uᵀ·g_m` and the gradient at `u`.
pub fn private_backward(u: &Matrix, m: &[Matrix; 3], grad_z: &[Matrix; 3]) -> Result<([Matrix; 3], Matrix)> {
    let mut grad_u = Matrix::zeros(u.rows(), u.cols());
    let mut grad_m: [Matrix; 3] = Default::default();
    for p in 0..3 {
        grad_m[p] = u.t_matmul(&grad_z[p])?;
        grad_u.add_assign(&grad_z[p].matmul_t(&m[p])?)?;
    }
    Ok((grad_m, grad_u))
}

/// Cloud half, upper end: from the gradient at each projection output to the
/// gradient at each `B` input (`scale · g·Bᵀ`), plus `grad(B_m) = scale · zᵀ·g`
/// when `z` (the received `u·M`) is supplied.
pub fn public_backward_up(
    grad_out: &[Matrix; 3],
    b: &[Matrix; 3],
    z: Option<&[Matrix; 3]>,
    scale: f32,
) -> Result<([Matrix; 3], Option<[Matrix; 3]>)> {
    let mut grad_z: [Matrix; 3] = Default::default();
    for p in 0..3 {
        grad_z[p] = grad_out[p].matmul_t(&b[p])?.scaled(scale);
    }
    let grad_b = match z {
        Some(z) => {
            let mut g: [Matrix; 3] = Default::default();
            for p in 0..3 {
                g[p] = z[p].t_matmul(&grad_out[p])?.scaled(scale);
            }
            Some(g)
        }
        None => None,
    };
    Ok((grad_z, grad_b))
}

/// Cloud half, lower end: gradient at `x` through `u = x·A` (`g_u·Aᵀ`), plus
/// `grad(A) = xᵀ·g_u` when `x` is supplied.
pub fn public_backward_down(grad_u: &Matrix, a: &Matrix, x: Option<&Matrix>) -> Result<(Matrix, Option<Matrix>)> {
    let grad_x = grad_u.matmul_t(a)?;
    let grad_a = x.map(|x| x.t_matmul(grad_u)).transpose()?;
    Ok((grad_x, grad_a))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainableFlags {
    pub m: bool,
    pub a: bool,
    pub b: bool,
}

impl From<&AdapterConfig> for TrainableFlags {
    fn from(cfg: &AdapterConfig) -> Self {
        TrainableFlags {
            m: cfg.trainable_m,
            a: cfg.trainable_a,
            b: cfg.trainable_b,
        }
    }
}

/// Everything one adapted layer saved during the forward pass.
pub struct AdapterStash<'a> {
    /// Input of the q/k/v projections.
    pub x: &'a Matrix,
    /// `x·A`.
    pub u: &'a Matrix,
    /// `u·M_m`.
    pub z: &'a [Matrix; 3],
}

#[derive(Debug, Clone, Default)]
pub struct LayerAdapterGrads {
    pub m: Option<[Matrix; 3]>,
    pub a: Option<Matrix>,
    pub b: Option<[Matrix; 3]>,
    /// Contribution of the residual path to the gradient at `x`.
    pub x: Matrix,
}

/// Full per-layer adapter gradients given the gradient arriving at each of the
/// q/k/v projection outputs. Frozen tensors are absent from the result.
pub fn adapter_grads(
    stash: &AdapterStash<'_>,
    public: &PublicLayer,
    private: &[Matrix; 3],
    scale: f32,
    grad_out: &[Matrix; 3],
    flags: TrainableFlags,
) -> Result<LayerAdapterGrads> {
    let (grad_z, grad_b) = public_backward_up(grad_out, &public.b, flags.b.then_some(stash.z), scale)?;
    let (grad_m, grad_u) = private_backward(stash.u, private, &grad_z)?;
    let (grad_x, grad_a) = public_backward_down(&grad_u, &public.a, flags.a.then_some(stash.x))?;
    Ok(LayerAdapterGrads {
        m: flags.m.then_some(grad_m),
        a: grad_a,
        b: grad_b,
        x: grad_x,
    })
}

// ---- ports --------------------------------------------------------------

/// Where the decoder stack obtains `u·M` for an adapted layer.
///
/// A local port multiplies in-process; a remote port ships `u` to the device
/// in one frame and receives the three products back in one frame.
pub trait AdapterPort {
    /// Given the down-projection `u = x·A_ℓ` (tokens × r_c2d), returns `u·M_ℓ^{q,k,v}`.
    fn forward(&mut self, layer: usize, down: &Matrix) -> Result<[Matrix; 3]>;

    /// Given the gradients at the three `B_ℓ` inputs, returns the gradient at `u`.
    fn backward(&mut self, layer: usize, grad_up: &[Matrix; 3]) -> Result<Matrix> {
        let _ = grad_up;
        Err(Error::internal(format!(
            "adapter port does not support backward (layer {layer})"
        )))
    }
}

/// A port for models without adapted layers; it is never legitimately called.
#[derive(Debug, Default)]
pub struct NullPort;

impl AdapterPort for NullPort {
    fn forward(&mut self, layer: usize, _down: &Matrix) -> Result<[Matrix; 3]> {
        Err(Error::internal(format!(
            "null adapter port called for layer {layer}"
        )))
    }
}

/// Multiplies by the private `M` in-process. With stashing enabled it remembers
/// every `u` so a later backward pass can produce `grad(M)`; this is exactly the
/// computation the device node performs on behalf of a remote cloud.
#[derive(Debug)]
pub struct LocalPort<'a> {
    weights: &'a DeviceAdapterWeights,
    stash: Option<BTreeMap<usize, Matrix>>,
    grads: BTreeMap<usize, [Matrix; 3]>,
}

impl<'a> LocalPort<'a> {
    pub fn new(weights: &'a DeviceAdapterWeights) -> Self {
        LocalPort {
            weights,
            stash: None,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_stash(weights: &'a DeviceAdapterWeights) -> Self {
        LocalPort {
            weights,
            stash: Some(BTreeMap::new()),
            grads: BTreeMap::new(),
        }
    }

    /// Accumulated `grad(M)` per layer.
    pub fn into_grads(self) -> BTreeMap<usize, [Matrix; 3]> {
        self.grads
    }

    pub fn grads(&self) -> &BTreeMap<usize, [Matrix; 3]> {
        &self.grads
    }

    pub fn clear_stash(&mut self) {
        if let Some(s) = &mut self.stash {
            s.clear();
        }
    }
}

impl AdapterPort for LocalPort<'_> {
    fn forward(&mut self, layer: usize, down: &Matrix) -> Result<[Matrix; 3]> {
        let m = self.weights.layer(layer)?;
        if down.cols() != m[0].rows() {
            return Err(Error::input(format!(
                "down-projection has {} columns, expected r_c2d={}",
                down.cols(),
                m[0].rows()
            )));
        }
        let z = [down.matmul(&m[0])?, down.matmul(&m[1])?, down.matmul(&m[2])?];
        if let Some(stash) = &mut self.stash {
            stash.insert(layer, down.clone());
        }
        Ok(z)
    }

    fn backward(&mut self, layer: usize, grad_up: &[Matrix; 3]) -> Result<Matrix> {
        let u = self
            .stash
            .as_ref()
            .and_then(|s| s.get(&layer))
            .ok_or_else(|| Error::internal(format!("missing stashed down-projection for layer {layer}")))?;
        let m = self.weights.layer(layer)?;
        for g in grad_up {
            if g.shape() != (u.rows(), m[0].cols()) {
                return Err(Error::input(format!(
                    "gradient at B input has shape {:?}, expected {:?}",
                    g.shape(),
                    (u.rows(), m[0].cols())
                )));
            }
        }
        let (grad_m, grad_u) = private_backward(u, m, grad_up)?;
        match self.grads.get_mut(&layer) {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grad_m) {
                    a.add_assign(g)?;
                }
            }
            None => {
                self.grads.insert(layer, grad_m);
            }
        }
        Ok(grad_u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdapterConfig {
        AdapterConfig::new(2, 3, vec![0, 1], 11)
    }

    #[test]
    fn init_zero_m_and_deterministic() {
        let (c1, d1, w) = init_adapters(&cfg(), 2, 8).unwrap();
        assert!(w.is_empty());
        assert!(d1.is_all_zero());
        let (c2, d2, _) = init_adapters(&cfg(), 2, 8).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(d1, d2);
        assert_eq!(c1.layers[&1].a.shape(), (8, 2));
        assert_eq!(c1.layers[&1].b[2].shape(), (3, 8));
        assert_eq!(d1.layers[&0][1].shape(), (2, 3));
    }

    #[test]
    fn oversized_rank_is_flagged_not_refused() {
        let (_, _, w) = init_adapters(&AdapterConfig::new(8, 2, vec![0], 1), 1, 8).unwrap();
        assert_eq!(w.len(), 1);
        assert!(AdapterConfig::new(2, 2, vec![3], 1).validate(2, 8).is_err());
        assert!(AdapterConfig::new(0, 2, vec![0], 1).validate(2, 8).is_err());
    }

    #[test]
    fn apply_zero_m_is_zero_and_identity_chain_returns_x() {
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32 - 5.0);
        let i = Matrix::identity(4);
        assert_eq!(apply_adapter(&x, &i, &i, &i, 1.0).unwrap(), x);
        let z = apply_adapter(&x, &i, &Matrix::zeros(4, 4), &i, 1.0).unwrap();
        assert!(z.is_all_zero());
        assert!(apply_adapter(&x, &i, &Matrix::zeros(3, 4), &i, 1.0).is_err());
    }

    #[test]
    fn reinit_preserves_shapes_and_changes_values() {
        let (c, _, _) = init_adapters(&cfg(), 2, 8).unwrap();
        let r = reinit_public(&c, 99);
        assert_eq!(r.init_seed, 99);
        for (l, old) in &c.layers {
            let new = &r.layers[l];
            assert_eq!(new.a.shape(), old.a.shape());
            for p in 0..3 {
                assert_eq!(new.b[p].shape(), old.b[p].shape());
            }
            let differing = new.a.data().iter().zip(old.a.data()).filter(|(a, b)| a != b).count();
            assert!(differing as f64 >= 0.99 * old.a.len() as f64);
        }
    }

    #[test]
    fn parameter_accounting() {
        let c = cfg();
        let (cloud, dev, _) = init_adapters(&c, 2, 8).unwrap();
        assert_eq!(dev.param_count(), c.device_param_count());
        assert_eq!(c.device_param_count(), 2 * 3 * 2 * 3);
        let cloud_count: usize = cloud
            .layers
            .values()
            .map(|l| l.a.len() + l.b.iter().map(Matrix::len).sum::<usize>())
            .sum();
        assert_eq!(cloud_count, c.cloud_param_count(8));
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_flags_are_respected() {
        let (cloud, mut dev, _) = init_adapters(&cfg(), 2, 8).unwrap();
        dev.layers.get_mut(&0).unwrap()[0].set(0, 0, 0.7);
        let x = Matrix::from_fn(4, 8, |r, c| ((r + c) as f32).cos());
        let u = x.matmul(&cloud.layers[&0].a).unwrap();
        let z = dev.layers[&0].clone().map(|m| u.matmul(&m).unwrap());
        let stash = AdapterStash { x: &x, u: &u, z: &z };
        let zero: [Matrix; 3] = std::array::from_fn(|_| Matrix::zeros(4, 8));
        let flags = TrainableFlags { m: true, a: true, b: true };
        let g = adapter_grads(&stash, &cloud.layers[&0], &dev.layers[&0], 1.0, &zero, flags).unwrap();
        assert!(g.x.is_all_zero());
        assert!(g.m.unwrap().iter().all(Matrix::is_all_zero));
        assert!(g.a.unwrap().is_all_zero());
        let g = adapter_grads(&stash, &cloud.layers[&0], &dev.layers[&0], 1.0, &zero, TrainableFlags { m: true, ..Default::default() }).unwrap();
        assert!(g.a.is_none() && g.b.is_none() && g.m.is_some());
    }

    #[test]
    fn local_port_backward_requires_stash() {
        let (_, dev, _) = init_adapters(&cfg(), 2, 8).unwrap();
        let mut port = LocalPort::new(&dev);
        let g: [Matrix; 3] = std::array::from_fn(|_| Matrix::zeros(1, 3));
        assert!(matches!(port.backward(0, &g), Err(Error::Internal(_))));
        assert!(NullPort.forward(0, &Matrix::zeros(1, 2)).is_err());
    }
}
