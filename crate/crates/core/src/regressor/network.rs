//! Field-embedding regressor: one embedding table per categorical field, a two-layer
//! encoder per numerical field, a GELU trunk over the concatenated field embeddings and
//! a linear head producing the scalar residual.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{FeatureVector, Slot};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schema::{FieldKind, EXTRA_BUCKETS, FIELDS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Width of every field embedding.
    pub embed_dim: usize,
    /// Hidden width of the numerical encoders.
    pub encoder_hidden: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    /// Whether the ratio-of-training-completed field is an input.
    pub with_frac: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            embed_dim: 32,
            encoder_hidden: 64,
            trunk_layers: 4,
            trunk_width: 256,
            with_frac: false,
        }
    }
}

impl Architecture {
    /// Smaller network that trains in seconds on a few thousand runs.
    pub fn compact() -> Self {
        Architecture {
            embed_dim: 16,
            encoder_hidden: 32,
            trunk_layers: 2,
            trunk_width: 128,
            with_frac: false,
        }
    }

    pub fn with_frac(mut self, with_frac: bool) -> Self {
        self.with_frac = with_frac;
        self
    }
}

/// Which training stage may update a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockGroup {
    Embedding,
    Encoder,
    Trunk,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub name: String,
    pub group: BlockGroup,
    pub value: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    missing: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    /// (schema index, table block) per categorical field.
    cats: Vec<(usize, usize)>,
    /// (schema index or `None` for frac, encoder) per numerical input.
    nums: Vec<(Option<usize>, EncoderIdx)>,
    extra_keys: usize,
    extra_enc: EncoderIdx,
    trunk: Vec<(usize, usize)>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn n_inputs(&self) -> usize {
        self.cats.len() + self.nums.len() + 1
    }
}

/// Gradients aligned with [`Model::blocks`].
pub type Grads<T> = Vec<Array2<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub blocks: Vec<Block<T>>,
    layout: Layout,
}

/// Block names and shapes in declaration order.
type BlockSpec = (String, BlockGroup, (usize, usize));

fn block_plan(arch: &Architecture) -> (Vec<BlockSpec>, Layout) {
    let de = arch.embed_dim;
    let dh = arch.encoder_hidden;
    let mut plan = Vec::new();
    let mut push = |name: String, group, shape| {
        plan.push((name, group, shape));
        plan.len() - 1
    };
    let mut cats = Vec::new();
    let mut nums = Vec::new();
    let encoder = |push: &mut dyn FnMut(String, BlockGroup, (usize, usize)) -> usize, prefix: &str| EncoderIdx {
        w1: push(format!("{prefix}.w1"), BlockGroup::Encoder, (1, dh)),
        b1: push(format!("{prefix}.b1"), BlockGroup::Encoder, (1, dh)),
        w2: push(format!("{prefix}.w2"), BlockGroup::Encoder, (dh, de)),
        b2: push(format!("{prefix}.b2"), BlockGroup::Encoder, (1, de)),
        missing: push(format!("{prefix}.missing"), BlockGroup::Encoder, (1, de)),
    };
    for (i, f) in FIELDS.iter().enumerate() {
        match f.kind {
            FieldKind::Categorical => {
                let t = push(format!("cat.{}.table", f.name), BlockGroup::Embedding, (f.vocabulary.len() + 1, de));
                cats.push((i, t));
            }
            FieldKind::Numerical => {
                let e = encoder(&mut push, &format!("num.{}", f.name));
                nums.push((Some(i), e));
            }
            FieldKind::HashedPairs => {}
        }
    }
    if arch.with_frac {
        let e = encoder(&mut push, "num.frac");
        nums.push((None, e));
    }
    let extra_keys = push("extra.keys".into(), BlockGroup::Embedding, (EXTRA_BUCKETS, de));
    let extra_enc = encoder(&mut push, "extra.value");
    let n_inputs = cats.len() + nums.len() + 1;
    let mut width = n_inputs * de;
    let mut trunk = Vec::new();
    for l in 0..arch.trunk_layers {
        let w = push(format!("trunk.{l}.w"), BlockGroup::Trunk, (width, arch.trunk_width));
        let b = push(format!("trunk.{l}.b"), BlockGroup::Trunk, (1, arch.trunk_width));
        trunk.push((w, b));
        width = arch.trunk_width;
    }
    let head_w = push("head.w".into(), BlockGroup::Head, (width, 1));
    let head_b = push("head.b".into(), BlockGroup::Head, (1, 1));
    let layout = Layout {
        cats,
        nums,
        extra_keys,
        extra_enc,
        trunk,
        head_w,
        head_b,
    };
    (plan, layout)
}

const GELU_C: f64 = 0.044_715;

/// Activations and the `tanh` terms reused by the backward pass.
fn gelu_forward<T: Scalar>(pre: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let two = T::of(2.0);
    // 1 - 2/(e^{2u}+1): cheaper than libm tanh and saturates cleanly.
    let t = pre.mapv(|x| T::one() - two / ((two * k * (x + c * x * x * x)).exp() + T::one()));
    let act = ndarray::Zip::from(pre).and(&t).map_collect(|&x, &t| half * x * (T::one() + t));
    (act, t)
}

/// `d_act ⊙ gelu'(pre)` given the cached `tanh` terms.
fn gelu_backward<T: Scalar>(d_act: &Array2<T>, pre: &Array2<T>, t: &Array2<T>) -> Array2<T> {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c3 = T::of(3.0 * GELU_C);
    let half = T::of(0.5);
    ndarray::Zip::from(d_act).and(pre).and(t).map_collect(|&d, &x, &t| {
        d * (half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c3 * x * x))
    })
}

/// Encoded inputs for a set of examples, laid out per field.
#[derive(Clone, Debug)]
pub struct Inputs<T> {
    len: usize,
    /// Row index into each categorical table (last row = missing).
    cats: Vec<Vec<usize>>,
    nums: Vec<Vec<Option<T>>>,
    extras: Vec<Vec<(usize, T)>>,
}

impl<T> Inputs<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct EncoderCache<T> {
    /// Rows of the batch holding a value (or extras entries, for the extras encoder).
    rows: Vec<usize>,
    x: Array2<T>,
    pre: Array2<T>,
    tanh: Array2<T>,
    act: Array2<T>,
}

struct Cache<T> {
    rows: Vec<usize>,
    nums: Vec<EncoderCache<T>>,
    extras: EncoderCache<T>,
    /// Owning batch row of each extras entry, and its bucket.
    extra_owner: Vec<(usize, usize)>,
    /// Activations entering each trunk layer, then the trunk output.
    xs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    tanh: Vec<Array2<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fan-in scaled uniform initialization; the head starts at zero so the model
    /// initially predicts a zero residual.
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let (plan, layout) = block_plan(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = plan
            .into_iter()
            .map(|(name, group, (r, c))| {
                let unit = name.ends_with(".table")
                    || name == "extra.keys"
                    || name.ends_with(".missing")
                    || name.ends_with(".w1")
                    || name.ends_with(".b1");
                let bound = if unit {
                    1.0
                } else if name.ends_with(".w2") || name.ends_with(".b2") {
                    1.0 / (arch.encoder_hidden as f64).sqrt()
                } else if group == BlockGroup::Trunk {
                    let fan_in = if name.ends_with(".w") { r } else { r.max(1) };
                    let fan_in = if name.ends_with(".b") {
                        // Bias shares the fan-in of its weight matrix.
                        0
                    } else {
                        fan_in
                    };
                    if fan_in == 0 {
                        0.0
                    } else {
                        1.0 / (fan_in as f64).sqrt()
                    }
                } else {
                    0.0
                };
                let value = if bound == 0.0 {
                    Array2::zeros((r, c))
                } else {
                    Array2::from_shape_fn((r, c), |_| T::of(rng.random_range(-bound..bound)))
                };
                Block { name, group, value }
            })
            .collect();
        let mut model = Model {
            arch: arch.clone(),
            blocks,
            layout,
        };
        // Trunk biases: same bound as their weight matrices.
        for (w, b) in model.layout.trunk.clone() {
            let fan_in = model.blocks[w].value.nrows() as f64;
            let bound = 1.0 / fan_in.sqrt();
            model.blocks[b].value.mapv_inplace(|_| T::of(rng.random_range(-bound..bound)));
        }
        model
    }

    /// Model with every weight set to zero.
    pub fn zeros(arch: &Architecture) -> Self {
        let mut m = Model::new(arch, 0);
        for b in m.blocks.iter_mut() {
            b.value.fill(T::zero());
        }
        m
    }

    /// Rebuilds a model from named blocks, checking names and shapes against `arch`.
    pub fn from_blocks(arch: &Architecture, values: Vec<(String, Array2<T>)>) -> Result<Self> {
        let (plan, layout) = block_plan(arch);
        if plan.len() != values.len() {
            return Err(Error::Shape(format!("expected {} blocks, got {}", plan.len(), values.len())));
        }
        let blocks = plan
            .into_iter()
            .zip(values)
            .map(|((name, group, shape), (got_name, value))| {
                if name != got_name || value.dim() != shape {
                    return Err(Error::Shape(format!(
                        "block `{got_name}` {:?} where `{name}` {shape:?} expected",
                        value.dim()
                    )));
                }
                Ok(Block { name, group, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            arch: arch.clone(),
            blocks,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.blocks.iter().map(|b| Array2::zeros(b.value.dim())).collect()
    }

    /// Encodes feature vectors, rejecting any that do not match the model's schema.
    pub fn encode(&self, fvs: &[FeatureVector]) -> Result<Inputs<T>> {
        let mut cats = vec![Vec::with_capacity(fvs.len()); self.layout.cats.len()];
        let mut nums = vec![Vec::with_capacity(fvs.len()); self.layout.nums.len()];
        let mut extras = Vec::with_capacity(fvs.len());
        for fv in fvs {
            fv.check_schema()?;
            if fv.frac.is_some() != self.arch.with_frac {
                return Err(Error::Shape(format!(
                    "frac field present = {}, model expects {}",
                    fv.frac.is_some(),
                    self.arch.with_frac
                )));
            }
            for (k, &(field, table)) in self.layout.cats.iter().enumerate() {
                let rows = self.blocks[table].value.nrows();
                let idx = match fv.fields[field].slot {
                    Slot::Category(i) if (i as usize) < rows - 1 => i as usize,
                    Slot::Missing => rows - 1,
                    other => {
                        return Err(Error::Shape(format!("field `{}`: bad slot {other:?}", FIELDS[field].name)));
                    }
                };
                cats[k].push(idx);
            }
            for (k, (field, _)) in self.layout.nums.iter().enumerate() {
                let v = match field {
                    Some(i) => match fv.fields[*i].slot {
                        Slot::Scalar(x) => Some(T::of(x)),
                        Slot::Missing => None,
                        other => {
                            return Err(Error::Shape(format!("field `{}`: bad slot {other:?}", FIELDS[*i].name)));
                        }
                    },
                    None => fv.frac.map(T::of),
                };
                nums[k].push(v);
            }
            let mut ex = Vec::with_capacity(fv.extras.len());
            for e in &fv.extras {
                if e.bucket as usize >= EXTRA_BUCKETS {
                    return Err(Error::Shape(format!("extra bucket {} out of range", e.bucket)));
                }
                ex.push((e.bucket as usize, T::of(e.value)));
            }
            extras.push(ex);
        }
        Ok(Inputs {
            len: fvs.len(),
            cats,
            nums,
            extras,
        })
    }

    fn run_encoder(&self, enc: &EncoderIdx, rows: Vec<usize>, x: Array2<T>) -> (EncoderCache<T>, Array2<T>) {
        let pre = x.dot(&self.blocks[enc.w1].value) + &self.blocks[enc.b1].value;
        let (act, tanh) = gelu_forward(&pre);
        let out = act.dot(&self.blocks[enc.w2].value) + &self.blocks[enc.b2].value;
        (EncoderCache { rows, x, pre, tanh, act }, out)
    }

    fn forward_cached(&self, inputs: &Inputs<T>, rows: &[usize]) -> (Array1<T>, Cache<T>) {
        let de = self.arch.embed_dim;
        let b = rows.len();
        let mut x0 = Array2::<T>::zeros((b, self.layout.n_inputs() * de));
        let mut slot = 0;
        for (k, &(_, table)) in self.layout.cats.iter().enumerate() {
            let t = &self.blocks[table].value;
            for (r, &row) in rows.iter().enumerate() {
                x0.slice_mut(s![r, slot * de..(slot + 1) * de]).assign(&t.row(inputs.cats[k][row]));
            }
            slot += 1;
        }
        let mut num_caches = Vec::with_capacity(self.layout.nums.len());
        for (k, (_, enc)) in self.layout.nums.iter().enumerate() {
            let present: Vec<usize> = (0..b).filter(|&r| inputs.nums[k][rows[r]].is_some()).collect();
            let x = Array2::from_shape_fn((present.len(), 1), |(i, _)| inputs.nums[k][rows[present[i]]].unwrap());
            let (cache, out) = self.run_encoder(enc, present, x);
            let missing = self.blocks[enc.missing].value.row(0);
            for r in 0..b {
                x0.slice_mut(s![r, slot * de..(slot + 1) * de]).assign(&missing);
            }
            for (i, &r) in cache.rows.iter().enumerate() {
                x0.slice_mut(s![r, slot * de..(slot + 1) * de]).assign(&out.row(i));
            }
            num_caches.push(cache);
            slot += 1;
        }
        let mut extra_owner = Vec::new();
        let mut extra_vals = Vec::new();
        for (r, &row) in rows.iter().enumerate() {
            for &(bucket, v) in &inputs.extras[row] {
                extra_owner.push((r, bucket));
                extra_vals.push(v);
            }
        }
        let x = Array2::from_shape_fn((extra_vals.len(), 1), |(i, _)| extra_vals[i]);
        let (extras_cache, out) = self.run_encoder(&self.layout.extra_enc, (0..extra_vals.len()).collect(), x);
        let keys = &self.blocks[self.layout.extra_keys].value;
        for (i, &(r, bucket)) in extra_owner.iter().enumerate() {
            let mut dst = x0.slice_mut(s![r, slot * de..(slot + 1) * de]);
            dst += &out.row(i);
            dst += &keys.row(bucket);
        }

        let mut xs = vec![x0];
        let mut pres = Vec::with_capacity(self.layout.trunk.len());
        let mut tanhs = Vec::with_capacity(self.layout.trunk.len());
        for &(w, bias) in &self.layout.trunk {
            let z = xs.last().unwrap().dot(&self.blocks[w].value) + &self.blocks[bias].value;
            let (act, t) = gelu_forward(&z);
            xs.push(act);
            pres.push(z);
            tanhs.push(t);
        }
        let y = xs.last().unwrap().dot(&self.blocks[self.layout.head_w].value) + &self.blocks[self.layout.head_b].value;
        let y = y.column(0).to_owned();
        (
            y,
            Cache {
                rows: rows.to_vec(),
                nums: num_caches,
                extras: extras_cache,
                extra_owner,
                xs,
                pre: pres,
                tanh: tanhs,
            },
        )
    }

    fn backward_encoder(&self, enc: &EncoderIdx, cache: &EncoderCache<T>, d_out: &Array2<T>, grads: &mut Grads<T>) {
        if cache.rows.is_empty() {
            return;
        }
        grads[enc.w2] += &cache.act.t().dot(d_out);
        grads[enc.b2] += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_act = d_out.dot(&self.blocks[enc.w2].value.t());
        let d_pre = gelu_backward(&d_act, &cache.pre, &cache.tanh);
        grads[enc.w1] += &cache.x.t().dot(&d_pre);
        grads[enc.b1] += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    }

    /// Accumulates `Σ d_y[i] · ∂y[i]/∂θ` into `grads`.
    fn backward_cached(&self, inputs: &Inputs<T>, cache: &Cache<T>, d_y: &Array1<T>, grads: &mut Grads<T>) {
        let de = self.arch.embed_dim;
        let b = cache.rows.len();
        let d_y2 = d_y.clone().insert_axis(Axis(1));
        let x_last = cache.xs.last().unwrap();
        grads[self.layout.head_w] += &x_last.t().dot(&d_y2);
        grads[self.layout.head_b][[0, 0]] += d_y.sum();
        let mut d_x = d_y2.dot(&self.blocks[self.layout.head_w].value.t());
        for (l, &(w, bias)) in self.layout.trunk.iter().enumerate().rev() {
            let d_z = gelu_backward(&d_x, &cache.pre[l], &cache.tanh[l]);
            grads[w] += &cache.xs[l].t().dot(&d_z);
            grads[bias] += &d_z.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_x = d_z.dot(&self.blocks[w].value.t());
        }

        let mut slot = 0;
        for (k, &(_, table)) in self.layout.cats.iter().enumerate() {
            let d = field_block(&d_x, slot, de);
            for r in 0..b {
                let idx = inputs.cats[k][cache.rows[r]];
                let mut g = grads[table].row_mut(idx);
                g += &d.row(r);
            }
            slot += 1;
        }
        for (k, (_, enc)) in self.layout.nums.iter().enumerate() {
            let d = field_block(&d_x, slot, de);
            let ec = &cache.nums[k];
            let mut present = vec![false; b];
            for &r in &ec.rows {
                present[r] = true;
            }
            {
                let mut g = grads[enc.missing].row_mut(0);
                for (r, p) in present.iter().enumerate() {
                    if !p {
                        g += &d.row(r);
                    }
                }
            }
            let d_out = Array2::from_shape_fn((ec.rows.len(), de), |(i, j)| d[[ec.rows[i], j]]);
            self.backward_encoder(enc, ec, &d_out, grads);
            slot += 1;
        }
        let d = field_block(&d_x, slot, de);
        let owners = &cache.extra_owner;
        let d_out = Array2::from_shape_fn((owners.len(), de), |(i, j)| d[[owners[i].0, j]]);
        for (i, &(_, bucket)) in owners.iter().enumerate() {
            let mut g = grads[self.layout.extra_keys].row_mut(bucket);
            g += &d_out.row(i);
        }
        self.backward_encoder(&self.layout.extra_enc, &cache.extras, &d_out, grads);
    }

    /// Predicted residuals for the given example rows.
    pub fn predict_rows(&self, inputs: &Inputs<T>, rows: &[usize]) -> Array1<T> {
        self.forward_cached(inputs, rows).0
    }

    /// Predicted residuals for every example, evaluated in fixed-size chunks.
    pub fn predict_all(&self, inputs: &Inputs<T>) -> Vec<T> {
        let rows: Vec<usize> = (0..inputs.len()).collect();
        rows.par_chunks(256)
            .map(|chunk| self.predict_rows(inputs, chunk).to_vec())
            .collect::<Vec<_>>()
            .concat()
    }

    pub fn forward(&self, fv: &FeatureVector) -> Result<T> {
        let inputs = self.encode(std::slice::from_ref(fv))?;
        Ok(self.predict_rows(&inputs, &[0])[0])
    }

    /// Gradients of `(forward(fv) − target)²` with respect to every block.
    pub fn backward(&self, fv: &FeatureVector, target: T) -> Result<Grads<T>> {
        let inputs = self.encode(std::slice::from_ref(fv))?;
        let (_, grads) = self.loss_and_grads(&inputs, &[0], &[target]);
        Ok(grads)
    }

    /// Mean squared error over `rows` and its gradient. Rows are processed in chunks of
    /// 128 in parallel and reduced in chunk order, so results do not depend on the
    /// thread count.
    pub fn loss_and_grads(&self, inputs: &Inputs<T>, rows: &[usize], targets: &[T]) -> (T, Grads<T>) {
        const CHUNK: usize = 128;
        let n = T::of(rows.len() as f64);
        let parts: Vec<(T, Grads<T>)> = rows
            .par_chunks(CHUNK)
            .zip(targets.par_chunks(CHUNK))
            .map(|(rows, targets)| {
                let (y, cache) = self.forward_cached(inputs, rows);
                let err: Array1<T> = y.iter().zip(targets).map(|(a, t)| *a - *t).collect();
                let sse = err.iter().map(|e| *e * *e).sum::<T>();
                let d_y = err.mapv(|e| (e + e) / n);
                let mut g = self.zero_grads();
                self.backward_cached(inputs, &cache, &d_y, &mut g);
                (sse, g)
            })
            .collect();
        let mut total = T::zero();
        let mut grads = self.zero_grads();
        for (sse, g) in parts {
            total += sse;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += &gi;
            }
        }
        (total / n, grads)
    }
}

fn field_block<T>(a: &Array2<T>, slot: usize, de: usize) -> ArrayView2<'_, T> {
    a.slice(s![.., slot * de..(slot + 1) * de])
}
