//! Encoder trunk, foreground/background heads and the two decoders.

use gigaslide_core::nn::{BatchNorm2d, Conv2d};
use gigaslide_core::sparse::MaskedTensor;
use gigaslide_core::{Graph, ParamId, ParamStore, Real, Tensor, UpsampleMode, Var, LEAKY_SLOPE};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaeError};
use crate::mask::{crosswise_mask, threshold_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaeConfig {
    /// Side of the (resized) input patch.
    pub input: usize,
    /// Output channels of the three stride-2 trunk stages.
    pub widths: [usize; 3],
    pub fg_channels: usize,
    pub bg_channels: usize,
    /// Channels of the decoder stages, coarse to fine.
    pub decoder: [usize; 3],
    pub rho_init: f64,
    pub rho_momentum: f64,
    /// One dense branch without the foreground/background split; requires
    /// `bg_channels == 0`.
    pub mixed: bool,
}

impl Default for ScaeConfig {
    fn default() -> Self {
        ScaeConfig {
            input: 112,
            widths: [16, 32, 64],
            fg_channels: 96,
            bg_channels: 32,
            decoder: [32, 16, 8],
            rho_init: 0.9,
            rho_momentum: 0.9,
            mixed: false,
        }
    }
}

impl ScaeConfig {
    pub fn embedding_channels(&self) -> usize {
        self.fg_channels + self.bg_channels
    }

    /// Side of the embedding maps (three stride-2 stages).
    pub fn map_size(&self) -> usize {
        self.input / 8
    }

    /// Single dense branch of `channels` maps.
    pub fn mixed(channels: usize) -> Self {
        ScaeConfig {
            fg_channels: channels,
            bg_channels: 0,
            mixed: true,
            ..ScaeConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        Ok(self.bn.forward(g, store, y)?)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    a: ConvBn,
    b: ConvBn,
}

impl ResidualBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.a.forward(g, store, x)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let y = self.b.forward(g, store, y)?;
        let y = g.add(y, x)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    entry: Conv2d,
    stages: Vec<Conv2d>,
}

impl Decoder {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, widths: [usize; 3], rng: &mut R) -> Self {
        let entry = Conv2d::new(store, &format!("{name}.entry"), cin, widths[0], 1, 1, 0, true, rng);
        let outs = [widths[1], widths[2], 3];
        let mut stages = Vec::new();
        let mut c = widths[0];
        for (i, &o) in outs.iter().enumerate() {
            stages.push(Conv2d::same(store, &format!("{name}.up{i}"), c, o, 3, rng));
            c = o;
        }
        // start from a zero reconstruction instead of a large random one
        stages.last().expect("three stages").zero_init(store);
        Decoder { entry, stages }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = self.entry.forward(g, store, x)?;
        y = g.leaky_relu(y, LEAKY_SLOPE);
        let last = self.stages.len() - 1;
        for (i, conv) in self.stages.iter().enumerate() {
            y = g.upsample(y, 2, UpsampleMode::Bilinear)?;
            y = conv.forward(g, store, y)?;
            if i != last {
                y = g.leaky_relu(y, LEAKY_SLOPE);
            }
        }
        Ok(y)
    }

    fn zero_init<T: Real>(&self, store: &mut ParamStore<T>) {
        self.entry.zero_init(store);
        self.stages.iter().for_each(|c| c.zero_init(store));
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ScaeForward<T> {
    /// Dense foreground candidates before sparsification, `[B, Cf, h, w]`.
    pub candidates: Var,
    /// Sparse foreground embedding `M ⊙ sigmoid(candidates)`.
    pub fg: Var,
    /// Dense background embedding, `[B, Cb, h, w]`.
    pub bg: Var,
    /// Crosswise mask `[B, 1, h, w]`; carries no gradient.
    pub mask: Tensor<T>,
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct Scae {
    pub config: ScaeConfig,
    stem: ConvBn,
    down1: ConvBn,
    res1: ResidualBlock,
    down2: ConvBn,
    res2: ResidualBlock,
    fg_head: Conv2d,
    bg_head: Option<Conv2d>,
    fg_decoder: Decoder,
    bg_decoder: Option<Decoder>,
    /// Running sparsity rate, kept as a buffer so checkpoints carry it.
    pub rho: ParamId,
    /// Running average of the training-time score cut; the inference threshold.
    pub cut: ParamId,
}

impl Scae {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: ScaeConfig, rng: &mut R) -> Result<Self> {
        if config.input % 8 != 0 || config.input == 0 {
            return Err(ScaeError::Invalid(format!("input side {} must be a positive multiple of 8", config.input)));
        }
        if !(config.rho_init > 0.0 && config.rho_init < 1.0) {
            return Err(ScaeError::Invalid(format!("sparsity rate {} outside (0, 1)", config.rho_init)));
        }
        if config.mixed != (config.bg_channels == 0) || config.fg_channels == 0 {
            return Err(ScaeError::Invalid(format!(
                "{} foreground / {} background channels with mixed = {}",
                config.fg_channels, config.bg_channels, config.mixed
            )));
        }
        let [w0, w1, w2] = config.widths;
        let res = |store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R| ResidualBlock {
            a: ConvBn::new(store, &format!("{name}.a"), c, c, 1, rng),
            b: ConvBn::new(store, &format!("{name}.b"), c, c, 1, rng),
        };
        let stem = ConvBn::new(store, "scae.stem", 3, w0, 2, rng);
        let down1 = ConvBn::new(store, "scae.down1", w0, w1, 2, rng);
        let res1 = res(store, "scae.res1", w1, rng);
        let down2 = ConvBn::new(store, "scae.down2", w1, w2, 2, rng);
        let res2 = res(store, "scae.res2", w2, rng);
        let fg_head = Conv2d::new(store, "scae.fg_head", w2, config.fg_channels, 1, 1, 0, true, rng);
        let fg_decoder = Decoder::new(store, "scae.fg_decoder", config.fg_channels, config.decoder, rng);
        let (bg_head, bg_decoder) = if config.mixed {
            (None, None)
        } else {
            (
                Some(Conv2d::new(store, "scae.bg_head", w2, config.bg_channels, 1, 1, 0, true, rng)),
                Some(Decoder::new(store, "scae.bg_decoder", config.bg_channels, config.decoder, rng)),
            )
        };
        let rho = store.buffer("scae.rho", Tensor::scalar(T::lit(config.rho_init)));
        let cut = store.buffer("scae.cut", Tensor::scalar(T::zero()));
        Ok(Scae {
            config,
            stem,
            down1,
            res1,
            down2,
            res2,
            fg_head,
            bg_head,
            fg_decoder,
            bg_decoder,
            rho,
            cut,
        })
    }

    pub fn rho<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.value(self.rho).item().to_f64().unwrap_or(f64::NAN)
    }

    pub fn set_rho<T: Real>(&self, store: &mut ParamStore<T>, rho: f64) {
        store.get_mut(self.rho).value = Tensor::scalar(T::lit(rho));
    }

    /// Zeroes every decoder layer. The output is then identically zero and
    /// only the final bias receives gradient, so this is for tests only.
    pub fn zero_init_decoders<T: Real>(&self, store: &mut ParamStore<T>) {
        self.fg_decoder.zero_init(store);
        if let Some(d) = &self.bg_decoder {
            d.zero_init(store);
        }
    }

    /// Shared trunk: `[B, 3, S, S]` → `[B, widths[2], S/8, S/8]`.
    fn trunk<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for stage in [&self.stem, &self.down1] {
            y = stage.forward(g, store, y)?;
            y = g.leaky_relu(y, LEAKY_SLOPE);
        }
        y = self.res1.forward(g, store, y)?;
        y = self.down2.forward(g, store, y)?;
        y = g.leaky_relu(y, LEAKY_SLOPE);
        self.res2.forward(g, store, y)
    }

    /// Encodes a batch of normalized patches without decoding. Training
    /// graphs threshold at the batch quantile for the current sparsity rate;
    /// inference graphs use the running cut, so each patch is encoded
    /// independently of its batch.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var, Var, Tensor<T>)> {
        let shape = g.shape(x).to_vec();
        let s = self.config.input;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(ScaeError::Invalid(format!("expected [B, 3, {s}, {s}] input, got {shape:?}")));
        }
        let trunk = self.trunk(g, store, x)?;
        let candidates = self.fg_head.forward(g, store, trunk)?;
        let mask = if self.config.mixed {
            let (b, _, h, w) = g.value(candidates).dims4()?;
            Tensor::ones(&[b, 1, h, w])
        } else if g.is_training() {
            let (mask, cut) = crosswise_mask(g.value(candidates), self.rho(store))?;
            let m = T::lit(self.config.rho_momentum);
            let old = store.value(self.cut).item();
            let cut = cut.unwrap_or(old);
            g.queue_buffer_update(self.cut, Tensor::scalar(m * old + (T::one() - m) * cut));
            mask
        } else {
            threshold_mask(g.value(candidates), Some(store.value(self.cut).item()))?
        };
        let gate = g.sigmoid(candidates);
        // straight-through: the mask is a constant, gradient reaches the
        // candidates only at activated sites
        let fg = g.mul_const(gate, &mask)?;
        let bg = match &self.bg_head {
            Some(head) => {
                let logits = head.forward(g, store, trunk)?;
                g.sigmoid(logits)
            }
            None => {
                let (b, _, h, w) = g.value(candidates).dims4()?;
                g.constant(Tensor::zeros(&[b, 0, h, w]))
            }
        };
        Ok((candidates, fg, bg, mask))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<ScaeForward<T>> {
        let (candidates, fg, bg, mask) = self.encode(g, store, x)?;
        let rf = self.fg_decoder.forward(g, store, fg)?;
        let recon = match &self.bg_decoder {
            Some(d) => {
                let rb = d.forward(g, store, bg)?;
                g.add(rf, rb)?
            }
            None => rf,
        };
        Ok(ScaeForward {
            candidates,
            fg,
            bg,
            mask,
            recon,
        })
    }
}

/// Per-patch vector: sparse mean of the foreground over its mask followed by
/// the dense mean of the background, `[B, Cf + Cb]`. Patches with an empty
/// mask get a zero foreground part.
pub fn pool_to_vector<T: Real>(fg: &Tensor<T>, bg: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, cf, h, w) = fg.dims4()?;
    let (bb, cb, hb, wb) = bg.dims4()?;
    if bb != b {
        return Err(ScaeError::Invalid(format!("batch mismatch {b} vs {bb}")));
    }
    let m = MaskedTensor::new(fg.clone(), mask.clone())?;
    let counts = m.observed_counts();
    let hw = h * w;
    let hwb = hb * wb;
    let (fd, md, bd) = (fg.data(), mask.data(), bg.data());
    let mut out = Vec::with_capacity(b * (cf + cb));
    for bi in 0..b {
        let n = counts[bi];
        for ci in 0..cf {
            if n == 0 {
                out.push(T::zero());
                continue;
            }
            let f = &fd[(bi * cf + ci) * hw..][..hw];
            let s: T = f.iter().zip(&md[bi * hw..][..hw]).map(|(&x, &o)| x * o).sum();
            out.push(s / T::lit(n as f64));
        }
        for ci in 0..cb {
            let plane = &bd[(bi * cb + ci) * hwb..][..hwb];
            out.push(plane.iter().copied().sum::<T>() / T::lit(hwb as f64));
        }
    }
    Ok(Tensor::from_vec(&[b, cf + cb], out)?)
}
