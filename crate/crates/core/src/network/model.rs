use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{ModelConfig, ModelParams};
use crate::alignment::{candidate_maps, patch_cells, reflect_index, topk_search, PatchGrid, TopK};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{CellPartition, Scalar, Tape, Tensor, Var};

/// Batch slot of the primary view.
pub const PRIMARY: usize = 1;

/// `F ⊙ (S ⊙ G) + F`: spatial map `s` (`N × C × H × W`) and channel weights
/// `g` (`N × C × 1 × 1`) modulate `f`, which is then added back.
pub fn residual_attention<T: Scalar>(tape: &Tape<T>, f: Var, s: Var, g: Var) -> Result<Var> {
    let att = tape.mul(s, g)?;
    tape.add(tape.mul(f, att)?, f)
}

pub struct ForwardOutput {
    /// Enhanced primary view, `1 × 3 × H × W`, unclamped.
    pub restored: Var,
    /// Stage predictions `I_t`, one per unit.
    pub stages: Vec<Var>,
    /// Per unit, the search result of each view against the primary.
    pub alignments: Vec<[TopK; 3]>,
}

pub struct InterOutput {
    /// Per-view features carried forward: `[aux 0, fused primary, aux 2]`.
    pub features: Var,
    /// Channel concatenation of each view's best match, `1 × 3C × H × W`.
    pub top1: Option<Var>,
    pub matches: [TopK; 3],
}

/// The network bound to one tape.
pub struct Network<'t, T: Scalar> {
    tape: &'t Tape<T>,
    cfg: ModelConfig,
    vars: HashMap<String, Var>,
    pad_maps: RefCell<HashMap<(usize, usize), Rc<Vec<usize>>>>,
    cells: RefCell<HashMap<(usize, usize), Rc<CellPartition>>>,
}

impl<'t, T: Scalar> Network<'t, T> {
    /// Records `params` on `tape`; gradients are tracked when `trainable`.
    pub fn new(tape: &'t Tape<T>, params: &ModelParams<T>, trainable: bool) -> Result<Self> {
        params.config.validate()?;
        Ok(Network {
            tape,
            cfg: params.config.clone(),
            vars: params.bind(tape, trainable),
            pad_maps: RefCell::new(HashMap::new()),
            cells: RefCell::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Tape variable of a named parameter.
    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("model has no parameter `{name}`")))
    }

    fn reflect_map(&self, h: usize, w: usize) -> Rc<Vec<usize>> {
        self.pad_maps
            .borrow_mut()
            .entry((h, w))
            .or_insert_with(|| {
                let mut map = Vec::with_capacity((h + 2) * (w + 2));
                for y in 0..h + 2 {
                    let sy = reflect_index(y as isize - 1, h);
                    for x in 0..w + 2 {
                        map.push(sy * w + reflect_index(x as isize - 1, w));
                    }
                }
                Rc::new(map)
            })
            .clone()
    }

    fn patch_cells(&self, h: usize, w: usize) -> Rc<CellPartition> {
        let patch = self.cfg.patch;
        self.cells
            .borrow_mut()
            .entry((h, w))
            .or_insert_with(|| Rc::new(patch_cells(h, w, patch)))
            .clone()
    }

    /// 3×3 convolution over a reflect-padded input.
    fn conv3(&self, x: Var, layer: &str) -> Result<Var> {
        let shape = self.tape.shape(x);
        let (h, w) = (shape[2], shape[3]);
        let padded = self
            .tape
            .gather(x, self.reflect_map(h, w), (h + 2, w + 2))?;
        let k = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        self.tape.conv2d(padded, k, b, 1, 0)
    }

    fn dense(&self, x: Var, layer: &str) -> Result<Var> {
        let k = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        self.tape.dense(x, k, b)
    }

    /// Shared encoder: `3 × 3 × H × W` views → `3 × C × H × W` features.
    pub fn encode(&self, views: Var) -> Result<Var> {
        let shape = self.tape.shape(views);
        if shape.len() != 4 || shape[0] != 3 || shape[1] != 3 {
            return Err(dim_err!(
                "encoder expects 3 RGB views (3×3×H×W), got {:?}",
                shape
            ));
        }
        let min_side = crate::image_io::MIN_NETWORK_SIDE;
        if shape[2] < min_side || shape[3] < min_side {
            return Err(dim_err!(
                "views {}x{} are below the {min_side}px minimum",
                shape[2],
                shape[3]
            ));
        }
        let mut f = views;
        for i in 0..self.cfg.encoder_depth {
            f = self
                .tape
                .leaky_relu(self.conv3(f, &format!("encoder.{i}"))?)?;
        }
        Ok(f)
    }

    /// Spatial attention map `N × C × H × W` in (0, 1).
    pub fn spatial_attention(&self, t: usize, f: Var, top1: Option<Var>) -> Result<Var> {
        let input = match top1 {
            Some(top1) => {
                let n = self.tape.shape(f)[0];
                let rep = self.tape.stack_batch(&vec![top1; n])?;
                self.tape.concat_channels(&[f, rep])?
            }
            None => f,
        };
        let s = self
            .tape
            .leaky_relu(self.conv3(input, &format!("unit{t}.spatial.0"))?)?;
        self.tape
            .sigmoid(self.conv3(s, &format!("unit{t}.spatial.1"))?)
    }

    /// Squeeze-and-excitation weights `N × C × 1 × 1` in (0, 1).
    pub fn channel_attention(&self, t: usize, f: Var) -> Result<Var> {
        let shape = self.tape.shape(f);
        let (n, c) = (shape[0], shape[1]);
        let pooled = self.tape.reshape(self.tape.global_avg_pool(f)?, &[n, c])?;
        let z = self
            .tape
            .relu(self.dense(pooled, &format!("unit{t}.se.reduce"))?)?;
        let g = self
            .tape
            .sigmoid(self.dense(z, &format!("unit{t}.se.expand"))?)?;
        self.tape.reshape(g, &[n, c, 1, 1])
    }

    /// Per-view residual enhancement. `top1` must be present exactly when the
    /// unit receives routed matches.
    pub fn intra_view_en(&self, t: usize, f: Var, top1: Option<Var>) -> Result<Var> {
        if !self.cfg.intra_en {
            return Ok(f);
        }
        if top1.is_some() != self.cfg.routes_top1_into(t) {
            return Err(Error::Contract(format!(
                "unit {t} {} routed top-1 features",
                if top1.is_some() {
                    "does not take"
                } else {
                    "requires"
                }
            )));
        }
        if let Some(top1) = top1 {
            let (fs, ts) = (self.tape.shape(f), self.tape.shape(top1));
            if ts.len() != 4 || ts[0] != 1 || ts[1] != 3 * fs[1] || ts[2..] != fs[2..] {
                return Err(dim_err!(
                    "top-1 features {:?} do not fit features {:?}",
                    ts,
                    fs
                ));
            }
        }
        let s = self.spatial_attention(t, f, top1)?;
        let g = self.channel_attention(t, f)?;
        residual_attention(self.tape, f, s, g)
    }

    /// Stage prediction `I_t` (`1 × 3 × H × W`) from the primary view.
    pub fn e2a_predict(&self, t: usize, f_intra: Var) -> Result<Var> {
        let primary = self.tape.select_batch(f_intra, PRIMARY)?;
        self.conv3(primary, &format!("unit{t}.e2a"))
    }

    /// Confidence map `1 × 1 × H × W` in (0, 1) from a stage prediction.
    pub fn confidence_eval(&self, t: usize, image: Var) -> Result<Var> {
        let c = self
            .tape
            .leaky_relu(self.conv3(image, &format!("unit{t}.cof.0"))?)?;
        self.tape.sigmoid(self.conv3(c, &format!("unit{t}.cof.1"))?)
    }

    fn view_grid(&self, values: &Tensor<T>, view: usize) -> Result<PatchGrid> {
        let (_, c, h, w) = values.dims4()?;
        let len = c * h * w;
        PatchGrid::partition(
            &values.data()[view * len..(view + 1) * len],
            c,
            h,
            w,
            self.cfg.patch,
        )
    }

    /// Aligns every view to the primary, fuses, and collects top-1 matches
    /// when `emit_top1`.
    pub fn inter_view_af(
        &self,
        t: usize,
        f_intra: Var,
        stage: Var,
        emit_top1: bool,
    ) -> Result<InterOutput> {
        let tape = self.tape;
        let values = tape.value(f_intra);
        let (n, _, h, w) = values.dims4()?;
        if n != 3 {
            return Err(dim_err!("alignment expects three views, got {n}"));
        }
        let primary = self.view_grid(&values, PRIMARY)?;
        let confidence = if self.cfg.e2a {
            let raw = self.confidence_eval(t, stage)?;
            Some(tape.cell_mean(raw, self.patch_cells(h, w))?)
        } else {
            None
        };
        let inv_k = T::lit(1.0 / self.cfg.k as f64);

        let mut views = Vec::with_capacity(3);
        let mut aligned = Vec::with_capacity(3);
        let mut top1 = Vec::with_capacity(3);
        let mut matches = Vec::with_capacity(3);
        for v in 0..3 {
            let source = self.view_grid(&values, v)?;
            let found = topk_search(&primary, &source, self.cfg.k, self.cfg.radius)?;
            let view = tape.select_batch(f_intra, v)?;
            let mut parts = Vec::with_capacity(self.cfg.k + 1);
            for map in candidate_maps(&found, h, w, self.cfg.patch)? {
                parts.push(tape.gather(view, Rc::new(map), (h, w))?);
            }
            let sum = parts[1..]
                .iter()
                .try_fold(parts[0], |acc, &p| tape.add(acc, p))?;
            let mut avg = tape.scale(sum, inv_k)?;
            if let Some(conf) = confidence {
                avg = tape.mul(avg, conf)?;
            }
            top1.push(parts[0]);
            parts.push(avg);
            aligned.push(tape.concat_channels(&parts)?);
            views.push(view);
            matches.push(found);
        }

        let g = tape.leaky_relu(
            self.conv3(tape.concat_channels(&aligned)?, &format!("unit{t}.gconv.0"))?,
        )?;
        let g = self.conv3(g, &format!("unit{t}.gconv.1"))?;
        let mut wt = tape.concat_channels(&views)?;
        for l in 0..4 {
            let z = self.conv3(wt, &format!("unit{t}.gwt.{l}"))?;
            wt = if l < 3 {
                tape.leaky_relu(z)?
            } else {
                tape.sigmoid(z)?
            };
        }
        let fused = tape.mul(wt, g)?;
        let features = tape.stack_batch(&[views[0], fused, views[2]])?;
        let top1 = if emit_top1 {
            Some(tape.concat_channels(&top1)?)
        } else {
            None
        };
        let matches: [TopK; 3] = matches.try_into().expect("three views");
        Ok(InterOutput {
            features,
            top1,
            matches,
        })
    }

    /// Output head on the primary view's final features.
    pub fn head(&self, features: Var) -> Result<Var> {
        let primary = self.tape.select_batch(features, PRIMARY)?;
        self.conv3(primary, "head")
    }

    /// Full forward pass on a `3 × 3 × H × W` batch (primary in slot 1).
    pub fn forward(&self, views: Var) -> Result<ForwardOutput> {
        let mut f = self.encode(views)?;
        let mut top1 = None;
        let mut stages = Vec::with_capacity(self.cfg.units);
        let mut alignments = Vec::with_capacity(self.cfg.units);
        for t in 1..=self.cfg.units {
            let f_intra = self.intra_view_en(t, f, top1.take())?;
            let stage = self.e2a_predict(t, f_intra)?;
            stages.push(stage);
            if self.cfg.inter_af {
                let emit = t < self.cfg.units && self.cfg.routes_top1_into(t + 1);
                let out = self.inter_view_af(t, f_intra, stage, emit)?;
                f = out.features;
                top1 = out.top1;
                alignments.push(out.matches);
            } else {
                f = f_intra;
            }
        }
        let restored = self.head(f)?;
        Ok(ForwardOutput {
            restored,
            stages,
            alignments,
        })
    }
}

/// Stacks three views into a `3 × 3 × H × W` tensor with `primary` moved to
/// slot 1 and the remaining two kept in their original order.
pub fn stack_views<T: Scalar>(
    views: &[crate::image_io::ImageRGB; 3],
    primary: usize,
) -> Result<Tensor<T>> {
    if primary > 2 {
        return Err(Error::Contract(format!(
            "primary index {primary} is not in 0..3"
        )));
    }
    let dims = views[0].dims();
    if views.iter().any(|v| v.dims() != dims) {
        return Err(dim_err!("views differ in size"));
    }
    let aux: Vec<usize> = (0..3).filter(|&i| i != primary).collect();
    let order = [aux[0], primary, aux[1]];
    let mut data = Vec::with_capacity(9 * dims.0 * dims.1);
    for &i in &order {
        data.extend(views[i].to_tensor::<T>().into_data());
    }
    Tensor::new(vec![3, 3, dims.0, dims.1], data)
}
