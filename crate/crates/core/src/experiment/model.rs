//! Sequential networks assembled from a config.

use crate::afn::{AfnCache, AfnLayer};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Conv2dCache, Linear, LinearCache, MaxPool2, MaxPool2Cache, Mode, Module, ParamMut, Relu, ReluCache};
use crate::norm::{default_groups, AffineCache, BatchNorm2d, BinCache, BinLayer, ScopedNorm, StatScope};
use crate::tensor::{Prng, Tensor};

use super::config::{Arch, ExperimentConfig, NormKind};

/// Stream tags under the run seed. Norm layers draw from their own stream
/// so that non-norm initialization is identical across norm choices.
pub const INIT_STREAM: u64 = 1;
pub const NORM_STREAM: u64 = 2;
pub const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum NormLayer {
    Batch(BatchNorm2d),
    Scoped(ScopedNorm),
    Bin(BinLayer),
    Afn(AfnLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Norm(NormLayer),
    Relu,
    Pool,
    /// `[N, ...] -> [N, rest]`
    Flatten,
    /// `[N, C] -> [N, C, 1, 1]`, used in front of norms in the MLP.
    Unflatten,
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv(Conv2dCache),
    Affine(AffineCache),
    Bin(BinCache),
    Afn(Box<AfnCache>),
    Relu(ReluCache),
    Pool(MaxPool2Cache),
    Reshape(Vec<usize>),
    Linear(LinearCache),
}

macro_rules! with_norm {
    ($norm:expr, $l:ident => $body:expr) => {
        match $norm {
            NormLayer::Batch($l) => $body,
            NormLayer::Scoped($l) => $body,
            NormLayer::Bin($l) => $body,
            NormLayer::Afn($l) => $body,
        }
    };
}

impl NormLayer {
    pub fn build(kind: NormKind, channels: usize, prng: &mut Prng) -> Result<Self> {
        Ok(match kind {
            NormKind::Batch => NormLayer::Batch(BatchNorm2d::new(channels)),
            NormKind::Layer => NormLayer::Scoped(ScopedNorm::layer_norm(channels)),
            NormKind::Instance => NormLayer::Scoped(ScopedNorm::instance_norm(channels)),
            NormKind::Group => NormLayer::Scoped(ScopedNorm::group_norm(channels, default_groups(channels))?),
            NormKind::Bin => NormLayer::Bin(BinLayer::new(channels)),
            NormKind::Asr => NormLayer::Afn(AfnLayer::new(channels, StatScope::Instance, prng)?),
            NormKind::Afn => NormLayer::Afn(AfnLayer::new(channels, StatScope::Batch, prng)?),
        })
    }

    fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            NormLayer::Batch(l) => {
                let (y, c) = l.apply(x, mode)?;
                (y, LayerCache::Affine(c))
            }
            NormLayer::Scoped(l) => {
                let (y, c) = l.apply(x, mode)?;
                (y, LayerCache::Affine(c))
            }
            NormLayer::Bin(l) => {
                let (y, c) = l.apply(x, mode)?;
                (y, LayerCache::Bin(c))
            }
            NormLayer::Afn(l) => {
                let (y, c) = l.apply(x, mode)?;
                (y, LayerCache::Afn(Box::new(c)))
            }
        })
    }

    fn track(&mut self, cache: &LayerCache) {
        match (self, cache) {
            (NormLayer::Batch(l), LayerCache::Affine(c)) => l.track(c),
            (NormLayer::Bin(l), LayerCache::Bin(c)) => l.track(c),
            (NormLayer::Afn(l), LayerCache::Afn(c)) => l.track(c),
            _ => {}
        }
    }

    fn backward(&self, cache: &LayerCache, dy: &Tensor) -> Result<crate::nn::Gradients> {
        match (self, cache) {
            (NormLayer::Batch(l), LayerCache::Affine(c)) => l.backward(c, dy),
            (NormLayer::Scoped(l), LayerCache::Affine(c)) => l.backward(c, dy),
            (NormLayer::Bin(l), LayerCache::Bin(c)) => l.backward(c, dy),
            (NormLayer::Afn(l), LayerCache::Afn(c)) => l.backward(c, dy),
            _ => Err(Error::Usage("cache does not belong to this norm layer".into())),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        with_norm!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        with_norm!(self, l => l.params_mut())
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        with_norm!(self, l => l.buffers())
    }
}

impl Layer {
    fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(l) => {
                let (y, c) = l.apply(x, mode)?;
                (y, LayerCache::Conv(c))
            }
            Layer::Norm(l) => l.apply(x, mode)?,
            Layer::Relu => {
                let (y, c) = Relu.apply(x, mode)?;
                (y, LayerCache::Relu(c))
            }
            Layer::Pool => {
                let (y, c) = MaxPool2.apply(x, mode)?;
                (y, LayerCache::Pool(c))
            }
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest = x.len() / n.max(1);
                (x.clone().reshape(&[n, rest])?, LayerCache::Reshape(x.shape().to_vec()))
            }
            Layer::Unflatten => {
                let [n, c] = x.dims2()?;
                (x.clone().reshape(&[n, c, 1, 1])?, LayerCache::Reshape(x.shape().to_vec()))
            }
            Layer::Linear(l) => {
                let (y, c) = l.apply(x, mode)?;
                (y, LayerCache::Linear(c))
            }
        })
    }

    fn backward(&self, cache: &LayerCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let g = match (self, cache) {
            (Layer::Conv(l), LayerCache::Conv(c)) => l.backward(c, dy)?,
            (Layer::Norm(l), c) => l.backward(c, dy)?,
            (Layer::Relu, LayerCache::Relu(c)) => Relu.backward(c, dy)?,
            (Layer::Pool, LayerCache::Pool(c)) => MaxPool2.backward(c, dy)?,
            (Layer::Flatten | Layer::Unflatten, LayerCache::Reshape(shape)) => {
                return Ok((dy.clone().reshape(shape)?, Vec::new()));
            }
            (Layer::Linear(l), LayerCache::Linear(c)) => l.backward(c, dy)?,
            _ => return Err(Error::Usage("cache does not belong to this layer".into())),
        };
        Ok((g.dx, g.params))
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv(l) => l.params(),
            Layer::Norm(l) => l.params(),
            Layer::Linear(l) => l.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match self {
            Layer::Conv(l) => l.params_mut(),
            Layer::Norm(l) => l.params_mut(),
            Layer::Linear(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }
}

/// Layer stack plus the input geometry it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<(String, Layer)>,
    input_dims: [usize; 3],
    num_classes: usize,
}

impl Model {
    pub fn layers(&self) -> &[(String, Layer)] {
        &self.layers
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = (&str, &NormLayer)> {
        self.layers.iter().filter_map(|(name, l)| match l {
            Layer::Norm(n) => Some((name.as_str(), n)),
            _ => None,
        })
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut NormLayer)> {
        self.layers.iter_mut().filter_map(|(name, l)| match l {
            Layer::Norm(n) => Some((name.as_str(), n)),
            _ => None,
        })
    }

    /// Forward pass. In Train mode running statistics are updated. Every
    /// layer output is checked; the first non-finite one aborts with its
    /// name.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (name, layer) in &mut self.layers {
            let (y, cache) = layer.apply(&h, mode).map_err(|e| rename(e, name))?;
            if !y.is_finite() {
                return Err(Error::numeric(name.clone(), "forward"));
            }
            if mode == Mode::Train {
                if let Layer::Norm(n) = layer {
                    n.track(&cache);
                }
            }
            caches.push(cache);
            h = y;
        }
        Ok((h, caches))
    }

    /// Pure forward pass returning logits.
    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (name, layer) in &self.layers {
            let (y, _) = layer.apply(&h, mode).map_err(|e| rename(e, name))?;
            if !y.is_finite() {
                return Err(Error::numeric(name.clone(), "forward"));
            }
            h = y;
        }
        Ok(h)
    }

    /// Gradients for every entry of `params_mut()`, in order.
    pub fn backward(&self, caches: &[LayerCache], dlogits: &Tensor) -> Result<Vec<Tensor>> {
        if caches.len() != self.layers.len() {
            return Err(Error::Usage("cache list does not match the model".into()));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut dy = dlogits.clone();
        for ((name, layer), cache) in self.layers.iter().zip(caches).rev() {
            let (dx, grads) = layer.backward(cache, &dy).map_err(|e| rename(e, name))?;
            if !dx.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(name.clone(), "backward"));
            }
            per_layer.push(grads);
            dy = dx;
        }
        Ok(per_layer.into_iter().rev().flatten().collect())
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers.iter_mut().flat_map(|(_, l)| l.params_mut()).collect()
    }

    /// First layer holding a non-finite parameter, if any.
    pub fn first_nonfinite_param(&self) -> Option<&str> {
        self.layers
            .iter()
            .find(|(_, l)| l.params().iter().any(|(_, t)| !t.is_finite()))
            .map(|(name, _)| name.as_str())
    }

    /// Parameters then buffers of every layer as `layer.tensor` names.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            for (p, t) in layer.params() {
                out.push((format!("{name}.{p}"), t));
            }
            if let Layer::Norm(n) = layer {
                for (b, t) in n.buffers() {
                    out.push((format!("{name}.{b}"), t));
                }
            }
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in &mut self.layers {
            if let Layer::Norm(n) = layer {
                // params_mut and buffers_mut would borrow the layer twice
                let mut buffers = Vec::new();
                collect_norm_state(name, n, &mut out, &mut buffers);
                out.extend(buffers);
            } else {
                for p in layer.params_mut() {
                    out.push((format!("{name}.{}", p.name), p.value));
                }
            }
        }
        out
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x, Mode::Eval)?;
        let [_, k] = logits.dims2()?;
        Ok(logits.data().chunks_exact(k).map(argmax).collect())
    }

    /// Eval-mode accuracy in `[0, 1]`.
    pub fn evaluate(&self, ds: &ImageDataset, batch_size: usize) -> Result<f64> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, labels) = ds.gather(chunk);
            let pred = self.predict(&x)?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Copies every tensor of a batch-norm model into this one. Non-norm
    /// layers must match exactly; AFN layers take the BN affine parameters
    /// and running statistics through `AfnLayer::load_from_bn`.
    pub fn adopt_from_bn(&mut self, bn_model: &Model) -> Result<()> {
        if self.layers.len() != bn_model.layers.len() {
            return Err(Error::Consistency("models have different depths".into()));
        }
        for ((name, mine), (other_name, theirs)) in self.layers.iter_mut().zip(&bn_model.layers) {
            if name != other_name {
                return Err(Error::Consistency(format!("layer `{name}` faces `{other_name}`")));
            }
            match (mine, theirs) {
                (Layer::Norm(NormLayer::Afn(afn)), Layer::Norm(NormLayer::Batch(bn))) => afn.load_from_bn(bn)?,
                (Layer::Norm(_), _) | (_, Layer::Norm(_)) => {
                    return Err(Error::Consistency(format!(
                        "layer `{name}`: expected an AFN layer facing a batch norm"
                    )))
                }
                (m, t) => {
                    let src = t.params();
                    let mut dst = m.params_mut();
                    if src.len() != dst.len() {
                        return Err(Error::Consistency(format!("layer `{name}` differs in kind")));
                    }
                    for (d, (pname, s)) in dst.iter_mut().zip(src) {
                        if d.value.shape() != s.shape() {
                            return Err(Error::Consistency(format!("parameter `{name}.{pname}` differs in shape")));
                        }
                        *d.value = s.clone();
                    }
                }
            }
        }
        Ok(())
    }

    /// Forces every AFN blend logit to `logit`.
    pub fn set_afn_lambda_logits(&mut self, logit: f64) {
        for (_, n) in self.norm_layers_mut() {
            if let NormLayer::Afn(a) = n {
                a.set_lambda_logits(logit);
            }
        }
    }
}

fn collect_norm_state<'a>(
    name: &str,
    n: &'a mut NormLayer,
    params: &mut Vec<(String, &'a mut Tensor)>,
    buffers: &mut Vec<(String, &'a mut Tensor)>,
) {
    match n {
        NormLayer::Batch(l) => {
            params.push((format!("{name}.gamma"), &mut l.gamma));
            params.push((format!("{name}.beta"), &mut l.beta));
            buffers.push((format!("{name}.running_mean"), &mut l.running_mean));
            buffers.push((format!("{name}.running_var"), &mut l.running_var));
        }
        NormLayer::Scoped(l) => {
            params.push((format!("{name}.gamma"), &mut l.gamma));
            params.push((format!("{name}.beta"), &mut l.beta));
        }
        NormLayer::Bin(l) => {
            params.push((format!("{name}.rho"), &mut l.rho));
            params.push((format!("{name}.gamma"), &mut l.gamma));
            params.push((format!("{name}.beta"), &mut l.beta));
            buffers.push((format!("{name}.running_mean"), &mut l.running_mean));
            buffers.push((format!("{name}.running_var"), &mut l.running_var));
        }
        NormLayer::Afn(l) => {
            let has_running = l.has_running_stats();
            let AfnLayer {
                stat_net,
                rescale_net,
                lambda_mu_logit,
                lambda_sigma_logit,
                lambda_gamma_logit,
                lambda_beta_logit,
                gamma_bias,
                beta_bias,
                running_mu,
                running_sigma,
                ..
            } = l;
            for (p, t) in stat_net.tensors_mut() {
                params.push((format!("{name}.{p}"), t));
            }
            for (p, t) in rescale_net.tensors_mut() {
                params.push((format!("{name}.{p}"), t));
            }
            for (p, t) in [
                ("lambda_mu_logit", lambda_mu_logit),
                ("lambda_sigma_logit", lambda_sigma_logit),
                ("lambda_gamma_logit", lambda_gamma_logit),
                ("lambda_beta_logit", lambda_beta_logit),
                ("gamma_bias", gamma_bias),
                ("beta_bias", beta_bias),
            ] {
                params.push((format!("{name}.{p}"), t));
            }
            if has_running {
                buffers.push((format!("{name}.running_mu"), running_mu));
                buffers.push((format!("{name}.running_sigma"), running_sigma));
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Re-labels a numeric error raised inside a layer with the layer's name
/// in the network.
fn rename(e: Error, name: &str) -> Error {
    match e {
        Error::Numeric { layer, stage } => Error::Numeric {
            layer: name.to_string(),
            stage: format!("{layer}/{stage}"),
        },
        other => other,
    }
}

/// Builds the network for `config` on inputs `[C, H, W]`.
///
/// ConvNet: `conv3x3 -> norm -> relu -> pool` twice, then
/// `fc(hidden) -> relu -> fc(K)`. MLP: `fc -> norm -> relu` per width in
/// `channels`, then `fc(K)`, with norms seeing `(N, C, 1, 1)`.
pub fn build_model(config: &ExperimentConfig, input_dims: [usize; 3], num_classes: usize) -> Result<Model> {
    config.validate()?;
    let root = Prng::new(config.seed);
    let mut init = root.fork(INIT_STREAM);
    let mut norm_prng = root.fork(NORM_STREAM);
    let [c_in, h, w] = input_dims;
    let mut layers: Vec<(String, Layer)> = Vec::new();
    match config.arch {
        Arch::Convnet => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::Config(format!(
                    "the ConvNet pools twice, so image sides must be multiples of 4 (got {h}x{w})"
                )));
            }
            let mut c = c_in;
            for (i, &width) in config.channels.iter().enumerate() {
                let k = i + 1;
                layers.push((format!("conv{k}"), Layer::Conv(Conv2d::he(c, width, 3, 1, &mut init))));
                layers.push((format!("norm{k}"), Layer::Norm(NormLayer::build(config.norm, width, &mut norm_prng)?)));
                layers.push((format!("relu{k}"), Layer::Relu));
                layers.push((format!("pool{k}"), Layer::Pool));
                c = width;
            }
            let flat = c * (h / 4) * (w / 4);
            layers.push(("flatten".into(), Layer::Flatten));
            layers.push(("fc1".into(), Layer::Linear(Linear::he(flat, config.hidden, &mut init))));
            layers.push(("relu_fc".into(), Layer::Relu));
            layers.push(("fc2".into(), Layer::Linear(Linear::he(config.hidden, num_classes, &mut init))));
        }
        Arch::Mlp => {
            layers.push(("flatten".into(), Layer::Flatten));
            let mut width_in = c_in * h * w;
            for (i, &width) in config.channels.iter().enumerate() {
                let k = i + 1;
                layers.push((format!("fc{k}"), Layer::Linear(Linear::he(width_in, width, &mut init))));
                layers.push((format!("unflatten{k}"), Layer::Unflatten));
                layers.push((format!("norm{k}"), Layer::Norm(NormLayer::build(config.norm, width, &mut norm_prng)?)));
                layers.push((format!("relu{k}"), Layer::Relu));
                layers.push((format!("flatten{k}"), Layer::Flatten));
                width_in = width;
            }
            let k = config.channels.len() + 1;
            layers.push((format!("fc{k}"), Layer::Linear(Linear::he(width_in, num_classes, &mut init))));
        }
    }
    Ok(Model {
        layers,
        input_dims,
        num_classes,
    })
}
