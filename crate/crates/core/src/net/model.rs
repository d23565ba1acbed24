use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{prior_bias, DetectorConfig};
use super::gate::{gate, Projection};
use crate::error::{Error, Result};
use crate::geom::LevelGrid;
use crate::numeric::{Bound, ParamStore, Real, Tape, Tensor, Var};

pub const SHARED_BIAS: &str = "cls.bias";
pub const REDUCE: &str = "fpn.reduce";
pub const EXPAND: &str = "head.expand";
/// Raw box outputs are clipped from above before `exp`, bounding distances
/// at `e^8 ≈ 2981` strides.
pub const BOX_RAW_MAX: f64 = 8.0;

/// Dense predictions of one pyramid level, flattened row-major over `(y, x)`.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `[h*w, 4]` (left, top, right, bottom) distances in pixels.
    pub boxes: Var,
    /// `[h*w]`
    pub quality: Var,
    /// `[h*w, cls_dim]`
    pub cls_feat: Var,
}

#[derive(Clone, Debug)]
pub struct DenseOutputs {
    pub levels: Vec<LevelOutput>,
    /// Shared classification bias, shape `[1]`.
    pub bias: Var,
}

impl DenseOutputs {
    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }

    pub fn grids(&self) -> Vec<LevelGrid> {
        self.levels
            .iter()
            .map(|l| LevelGrid {
                stride: l.stride,
                h: l.h,
                w: l.w,
            })
            .collect()
    }

    /// Levels concatenated along locations: `(boxes [L,4], quality [L], cls_feat [L,D])`.
    pub fn concat<T: Real>(&self, tape: &mut Tape<T>) -> Result<(Var, Var, Var)> {
        let pick = |f: fn(&LevelOutput) -> Var| self.levels.iter().map(f).collect::<Vec<_>>();
        let b = tape.concat(&pick(|l| l.boxes), 0)?;
        let q = tape.concat(&pick(|l| l.quality), 0)?;
        let c = tape.concat(&pick(|l| l.cls_feat), 0)?;
        Ok((b, q, c))
    }
}

/// The detector graph for one configuration. Parameters live in a
/// [`ParamStore`] so the same graph can be evaluated in f32 or f64.
#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    fn levels(&self) -> usize {
        self.cfg.fpn.levels
    }

    fn lateral(&self, level: usize) -> String {
        if level + 1 == self.levels() {
            REDUCE.to_string()
        } else {
            format!("fpn.lat{level}")
        }
    }

    /// Gate parameter names; empty for the standard wiring.
    pub fn gate_names(&self) -> Vec<String> {
        if !self.cfg.apa.enabled {
            return Vec::new();
        }
        let mut names: Vec<String> = (0..self.levels())
            .map(|i| format!("fpn.out{i}.gate"))
            .collect();
        names.extend((0..self.levels() - 1).map(|i| format!("fpn.merge{i}.gate")));
        names.push("head.gate".into());
        names
    }

    /// `(name, [out, in, k, k], init std)` for every convolution.
    fn conv_specs(&self) -> Vec<(String, [usize; 4], f64)> {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let ch = &self.cfg.backbone.channels;
        let f = self.cfg.fpn.dim;
        let mut v = vec![("backbone.stem".to_string(), [ch[0], 3, 3, 3], he(27))];
        let mut prev = ch[0];
        for (s, &c) in ch.iter().enumerate() {
            v.push((format!("backbone.s{s}.down"), [c, prev, 3, 3], he(prev * 9)));
            v.push((format!("backbone.s{s}.conv"), [c, c, 3, 3], he(c * 9)));
            prev = c;
        }
        for (i, &c) in ch.iter().enumerate() {
            v.push((self.lateral(i), [f, c, 1, 1], (1.0 / c as f64).sqrt()));
            v.push((
                format!("fpn.out{i}"),
                [f, f, 3, 3],
                (1.0 / (f * 9) as f64).sqrt(),
            ));
        }
        for j in 0..self.cfg.head.depth {
            v.push((format!("head.trunk{j}"), [f, f, 3, 3], he(f * 9)));
        }
        v.push(("head.box".into(), [4, f, 3, 3], 0.01));
        v.push(("head.quality".into(), [1, f, 3, 3], 0.01));
        v.push(("head.cls".into(), [f, f, 3, 3], 0.01));
        v.push((
            EXPAND.into(),
            [self.cfg.cls_dim, f, 1, 1],
            (1.0 / f as f64).sqrt(),
        ));
        v
    }

    /// Fresh parameters. Under the aligned wiring the reduce and expand
    /// projections start as the cropped identity and its transpose and all
    /// gates start closed.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let apa = self.cfg.apa.enabled;
        for (name, shape, std) in self.conv_specs() {
            let (w, b) = conv_names(&name);
            let weight = if apa && name == REDUCE {
                Projection::reduce(self.cfg.final_dim(), self.cfg.fpn.dim)?.as_kernel()
            } else if apa && name == EXPAND {
                Projection::expand(self.cfg.fpn.dim, self.cfg.cls_dim)?.as_kernel()
            } else {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
                let n = shape.iter().product();
                Tensor::new(
                    shape,
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
                )?
            };
            store.insert(w, weight);
            store.insert(b, Tensor::zeros([shape[0]]));
        }
        for g in self.gate_names() {
            store.insert(g, Tensor::scalar(0.0));
        }
        store.insert(
            SHARED_BIAS,
            Tensor::scalar(prior_bias(self.cfg.bias.prior_p) as f32),
        );
        Ok(store)
    }

    fn conv<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        name: &str,
        x: Var,
        pad: usize,
        stride: usize,
    ) -> Result<Var> {
        let (w, b) = conv_names(name);
        let y = tape.conv2d(x, p.var(&w)?, stride, pad)?;
        tape.add_bias(y, p.var(&b)?, 1)
    }

    fn conv3<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        self.conv(tape, p, name, x, 1, 1)
    }

    fn gated<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        name: &str,
        x: Var,
        y: Var,
    ) -> Result<Var> {
        gate(tape, x, y, p.var(name)?, self.cfg.apa.gate_form)
    }

    /// Backbone feature maps `[1, c_s, H/4^.., ..]` at strides 4, 8, 16, ...
    /// The last map is left linear.
    pub fn backbone<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let mut x = self.conv(tape, p, "backbone.stem", image, 1, 2)?;
        x = tape.relu(x)?;
        let stages = self.cfg.backbone.channels.len();
        let mut feats = Vec::with_capacity(stages);
        for s in 0..stages {
            x = self.conv(tape, p, &format!("backbone.s{s}.down"), x, 1, 2)?;
            x = tape.relu(x)?;
            x = self.conv3(tape, p, &format!("backbone.s{s}.conv"), x)?;
            if s + 1 < stages {
                x = tape.relu(x)?;
            }
            feats.push(x);
        }
        Ok(feats)
    }

    /// Pyramid features `[1, fpn_dim, h, w]`, finest level first.
    fn pyramid<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, feats: &[Var]) -> Result<Vec<Var>> {
        let n = self.levels();
        let apa = self.cfg.apa.enabled;
        let mut outs = vec![None; n];
        let mut merged: Option<Var> = None;
        for i in (0..n).rev() {
            let lat = self.conv(tape, p, &self.lateral(i), feats[i], 0, 1)?;
            let m = match merged {
                None => lat,
                Some(above) => {
                    let up = tape.upsample2x(above)?;
                    if apa {
                        self.gated(tape, p, &format!("fpn.merge{i}.gate"), up, lat)?
                    } else {
                        tape.add(up, lat)?
                    }
                }
            };
            let refined = self.conv3(tape, p, &format!("fpn.out{i}"), m)?;
            outs[i] = Some(if apa {
                self.gated(tape, p, &format!("fpn.out{i}.gate"), m, refined)?
            } else {
                refined
            });
            merged = Some(m);
        }
        Ok(outs
            .into_iter()
            .map(|o| o.expect("every level visited"))
            .collect())
    }

    /// `[1, C, h, w]` to `[h*w, C]`.
    fn to_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[s[1], s[2] * s[3]])?;
        tape.transpose(flat)
    }

    fn head<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feat: Var,
        stride: usize,
    ) -> Result<LevelOutput> {
        let s = tape.shape(feat).to_vec();
        let (h, w) = (s[2], s[3]);
        let mut t = feat;
        for j in 0..self.cfg.head.depth {
            t = self.conv3(tape, p, &format!("head.trunk{j}"), t)?;
            t = tape.relu(t)?;
        }
        let raw_box = self.conv3(tape, p, "head.box", t)?;
        let over = tape.offset(raw_box, -BOX_RAW_MAX)?;
        let over = tape.relu(over)?;
        let raw_box = tape.sub(raw_box, over)?;
        let e = tape.exp(raw_box)?;
        let dist = tape.scale(e, stride as f64)?;
        let q = self.conv3(tape, p, "head.quality", t)?;
        let mut c = self.conv3(tape, p, "head.cls", t)?;
        if self.cfg.apa.enabled {
            c = self.gated(tape, p, "head.gate", feat, c)?;
        }
        let c = self.conv(tape, p, EXPAND, c, 0, 1)?;
        let boxes = Self::to_rows(tape, dist)?;
        let quality = tape.reshape(q, &[h * w])?;
        let cls_feat = Self::to_rows(tape, c)?;
        Ok(LevelOutput {
            stride,
            h,
            w,
            boxes,
            quality,
            cls_feat,
        })
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        let d = self.cfg.size_divisor();
        if shape.len() != 3
            || shape[0] != 3
            || !shape[1].is_multiple_of(d)
            || !shape[2].is_multiple_of(d)
        {
            return Err(Error::Shape(format!(
                "image must be [3, H, W] with H, W divisible by {d}, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Records `image` (`[3, H, W]`) on the tape.
    pub fn input<T: Real>(&self, tape: &mut Tape<T>, image: &Tensor) -> Result<Var> {
        self.check_image(image.shape())?;
        let s = image.shape();
        let v = tape.constant(image)?;
        tape.reshape(v, &[1, s[0], s[1], s[2]])
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: &Tensor,
    ) -> Result<DenseOutputs> {
        let x = self.input(tape, image)?;
        let feats = self.backbone(tape, p, x)?;
        let pyr = self.pyramid(tape, p, &feats)?;
        let levels = pyr
            .into_iter()
            .enumerate()
            .map(|(i, f)| self.head(tape, p, f, self.cfg.level_stride(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseOutputs {
            levels,
            bias: p.var(SHARED_BIAS)?,
        })
    }

    /// Names of parameters in branches that gates block at init.
    pub fn gated_branch_prefixes(&self) -> Vec<&'static str> {
        vec![
            "fpn.lat",
            "fpn.out",
            "head.trunk",
            "head.box",
            "head.quality",
            "head.cls",
        ]
    }
}
