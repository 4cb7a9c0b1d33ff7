use super::{Architecture, FusenetError, LEAKY_SLOPE};
use crate::numerics::{attention, concat, conv2d, NumericsError, Tensor, Var};
use crate::perception::QUESTION_COUNT;

fn shape_err(detail: String) -> FusenetError {
    FusenetError::Numerics(NumericsError::Shape { op: "fusenet", detail })
}

/// Model parameters bound to a tape, with the layer functions over them.
pub struct Network<'t, 'm> {
    arch: &'m Architecture,
    names: &'m [String],
    vars: Vec<Var<'t>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ir,
    Vis,
}

impl Modality {
    fn key(self) -> &'static str {
        match self {
            Self::Ir => "ir",
            Self::Vis => "vis",
        }
    }
}

impl<'t, 'm> Network<'t, 'm> {
    pub(crate) fn new(arch: &'m Architecture, names: &'m [String], vars: Vec<Var<'t>>) -> Self {
        Self { arch, names, vars }
    }

    /// Bound parameters, in the model's storage order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Replace one bound parameter, e.g. with a probe variable.
    pub fn with_var(mut self, name: &str, var: Var<'t>) -> Self {
        let i = self.index(name);
        assert_eq!(self.vars[i].shape(), var.shape(), "replacement for {name} has the wrong shape");
        self.vars[i] = var;
        self
    }

    fn index(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    fn var(&self, name: &str) -> Var<'t> {
        self.vars[self.index(name)]
    }

    fn conv(&self, prefix: &str, x: Var<'t>, stride: usize) -> Result<Var<'t>, FusenetError> {
        let w = self.var(&format!("{prefix}.weight"));
        let pad = w.shape()[2] / 2;
        let x = if pad > 0 { x.pad_replicate(pad, pad, pad, pad)? } else { x };
        Ok(conv2d(x, w, stride, 0)?.add_channel_bias(self.var(&format!("{prefix}.bias")))?)
    }

    fn conv_act(&self, prefix: &str, x: Var<'t>, stride: usize) -> Result<Var<'t>, FusenetError> {
        Ok(self.conv(prefix, x, stride)?.leaky_relu(LEAKY_SLOPE))
    }

    /// Two 3×3 convolutions with leaky activations: `N×1×H×W` → `N×C×H×W`.
    pub fn extract_features(&self, modality: Modality, image: Var<'t>) -> Result<Var<'t>, FusenetError> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(shape_err(format!("extractor expects N×1×H×W, got {s:?}")));
        }
        let m = modality.key();
        let x = self.conv_act(&format!("extract.{m}.conv1"), image, 1)?;
        self.conv_act(&format!("extract.{m}.conv2"), x, 1)
    }

    /// Learned 4→1 combination of each modality's answer embeddings; rows
    /// are stacked as `[ir; vis]` into a `2×d` guidance matrix.
    pub fn reduce_text_features(&self, text_ir: Var<'t>, text_vis: Var<'t>) -> Result<Var<'t>, FusenetError> {
        let want = [QUESTION_COUNT, self.arch.embed_dim];
        for t in [&text_ir, &text_vis] {
            if t.shape() != want {
                return Err(shape_err(format!("text embeddings must be {want:?}, got {:?}", t.shape())));
            }
        }
        let ir = self.var("reduce.ir.weight").matmul(text_ir)?;
        let vis = self.var("reduce.vis.weight").matmul(text_vis)?;
        Ok(concat(&[ir, vis], 0)?)
    }

    /// Cross-attention block `block` applied to both modalities. Queries come
    /// from each sample's `2×d` guidance, keys and values from that sample's
    /// features; the projected attention output is added to every pixel.
    pub fn cross_attention_block(
        &self,
        block: usize,
        m_ir: Var<'t>,
        m_vis: Var<'t>,
        guidance: &[Var<'t>],
    ) -> Result<(Var<'t>, Var<'t>), FusenetError> {
        if m_ir.shape() != m_vis.shape() {
            return Err(shape_err(format!("feature maps differ: {:?} vs {:?}", m_ir.shape(), m_vis.shape())));
        }
        let (n, c, h, w) = (m_ir.value().dims4()?.0, self.arch.channels, m_ir.shape()[2], m_ir.shape()[3]);
        if m_ir.shape()[1] != c || guidance.len() != n {
            return Err(shape_err(format!("{} guidance rows for features {:?}", guidance.len(), m_ir.shape())));
        }
        let p = format!("attn{block}");
        let (w_q, w_k, w_v, w_o) = (
            self.var(&format!("{p}.w_q")),
            self.var(&format!("{p}.w_k")),
            self.var(&format!("{p}.w_v")),
            self.var(&format!("{p}.w_o")),
        );
        let dk = self.arch.attn_dim;
        let mut out = Vec::with_capacity(2);
        for m in [m_ir, m_vis] {
            let mut rows = Vec::with_capacity(n);
            for (i, g) in guidance.iter().enumerate() {
                if g.shape() != [2, self.arch.embed_dim] {
                    return Err(shape_err(format!("guidance must be 2×{}, got {:?}", self.arch.embed_dim, g.shape())));
                }
                let x = m.narrow(0, i, 1)?.reshape([c, h * w])?.transpose()?;
                let q = g.matmul(w_q)?;
                let k = x.matmul(w_k)?;
                let v = x.matmul(w_v)?;
                let a = attention(q, k, v)?.reshape([1, 2 * dk])?;
                rows.push(a.matmul(w_o)?);
            }
            out.push(m.add_channel_vector(concat(&rows, 0)?)?);
        }
        Ok((out[0], out[1]))
    }

    /// Channel-concatenate both feature maps and reconstruct a `N×1×H×W`
    /// image in `[0,1]`. Inputs are replicate-padded to a multiple of
    /// `2^scales` and the output is cropped back.
    pub fn encode_decode(&self, f_ir: Var<'t>, f_vis: Var<'t>) -> Result<Var<'t>, FusenetError> {
        if f_ir.shape() != f_vis.shape() || f_ir.shape().len() != 4 || f_ir.shape()[1] != self.arch.channels {
            return Err(shape_err(format!("feature maps {:?} and {:?}", f_ir.shape(), f_vis.shape())));
        }
        let (h, w) = (f_ir.shape()[2], f_ir.shape()[3]);
        let mult = self.arch.size_multiple();
        let (ph, pw) = (h.div_ceil(mult) * mult - h, w.div_ceil(mult) * mult - w);
        let mut x = concat(&[f_ir, f_vis], 1)?;
        if ph > 0 || pw > 0 {
            x = x.pad_replicate(0, ph, 0, pw)?;
        }
        let x = self.conv_act("merge", x, 1)?;
        let mut cur = self.conv_act("enc0", x, 1)?;
        let mut skips = vec![cur];
        for k in 1..=self.arch.scales {
            cur = self.conv_act(&format!("down{k}"), cur, 2)?;
            skips.push(cur);
        }
        for k in (1..=self.arch.scales).rev() {
            let reduced = self.conv_act(&format!("up{k}.reduce"), cur, 1)?;
            let merged = reduced.upsample_nearest2x()?.add(skips[k - 1])?;
            cur = self.conv_act(&format!("up{k}.conv"), merged, 1)?;
        }
        let y = self.conv("head", cur, 1)?.sigmoid();
        if ph > 0 || pw > 0 {
            Ok(y.crop(0, 0, h, w)?)
        } else {
            Ok(y)
        }
    }

    /// Full forward pass on `N×1×H×W` source batches. `text` holds the
    /// `N×4×d` answer embeddings of each modality; `None` bypasses the
    /// cross-attention blocks entirely.
    pub fn forward(
        &self,
        ir: Var<'t>,
        vis: Var<'t>,
        text: Option<(&Tensor, &Tensor)>,
    ) -> Result<Var<'t>, FusenetError> {
        if ir.shape() != vis.shape() {
            return Err(shape_err(format!("source shapes differ: {:?} vs {:?}", ir.shape(), vis.shape())));
        }
        let mut m_ir = self.extract_features(Modality::Ir, ir)?;
        let mut m_vis = self.extract_features(Modality::Vis, vis)?;
        if let Some((t_ir, t_vis)) = text {
            let n = ir.shape()[0];
            let want = [n, QUESTION_COUNT, self.arch.embed_dim];
            if t_ir.shape() != want || t_vis.shape() != want {
                return Err(shape_err(format!(
                    "text batches must be {want:?}, got {:?} and {:?}",
                    t_ir.shape(),
                    t_vis.shape()
                )));
            }
            let tape = ir.tape();
            let guidance = (0..n)
                .map(|i| self.reduce_text_features(tape.constant(t_ir.index0(i)), tape.constant(t_vis.index0(i))))
                .collect::<Result<Vec<_>, _>>()?;
            for b in 0..self.arch.blocks {
                (m_ir, m_vis) = self.cross_attention_block(b, m_ir, m_vis, &guidance)?;
            }
        }
        self.encode_decode(m_ir, m_vis)
    }
}
