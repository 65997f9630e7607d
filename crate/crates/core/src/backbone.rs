//! Rotation-equivariant convolutional encoder over the discrete cyclic
//! group C_N.
//!
//! Feature fields carry an orientation axis: data is laid out
//! `[channels, orientations, height, width]`. A lifting convolution takes a
//! plain image (one orientation slot) to N slots by convolving with N
//! rotated copies of one base kernel; group convolutions additionally shift
//! the input-orientation axis so that rotating the input permutes the
//! output slots instead of changing their content.
//!
//! Only base kernels are trainable. Realized filter banks are rebuilt from
//! the base on every forward pass through a sparse gather, so the rotated
//! copies can never drift apart.
//!
//! For order 4 every rotation is an exact pixel permutation and
//! equivariance holds to accumulation round-off. Order 8 realizes odd
//! elements by composing an exact quarter-turn with one bilinear 45 degree
//! kernel resampling; quarter-turn equivariance stays exact, the
//! intermediate angles are approximate by construction.

use crate::error::{Error, Result};
use crate::tape::{GatherMap, Graph, Var};
use crate::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// Discrete rotation group C_N.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpec {
    order: usize,
}

impl GroupSpec {
    /// Supported orders are 1, 2, 4 (exact raster permutations) and 8
    /// (intermediate angles via bilinear kernel resampling).
    pub fn new(order: usize) -> Result<Self> {
        match order {
            1 | 2 | 4 | 8 => Ok(GroupSpec { order }),
            _ => Err(Error::Config(format!(
                "group order {} not realizable on a square raster; use 1, 2, 4, or 8",
                order
            ))),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Quarter turns of the pixel grid for group element `r`, when the
    /// element's angle is a multiple of 90 degrees.
    pub fn quarter_turns(&self, r: usize) -> Result<usize> {
        if r >= self.order {
            return Err(Error::Domain(format!(
                "rotation index {} out of range for order {}",
                r, self.order
            )));
        }
        match self.order {
            8 => {
                if r % 2 != 0 {
                    Err(Error::Domain(
                        "45 degree feature rotation is not representable on the pixel grid".into(),
                    ))
                } else {
                    Ok((r / 2) % 4)
                }
            }
            n => Ok((r * (4 / n)) % 4),
        }
    }
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec { order: 4 }
    }
}

/// Encoder layout: stage `i` convolves to `stage_widths[i]` channels and
/// then halves the spatial side when `downsample[i] == 2`. Stage 0 is the
/// lifting layer, later stages are group convolutions.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub group: GroupSpec,
    pub stage_widths: Vec<usize>,
    pub kernel_size: usize,
    pub downsample: Vec<usize>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.stage_widths.is_empty() || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "stage widths {:?} must be non-empty and positive",
                self.stage_widths
            )));
        }
        if self.downsample.len() != self.stage_widths.len() {
            return Err(Error::Config(format!(
                "{} downsample factors for {} stages",
                self.downsample.len(),
                self.stage_widths.len()
            )));
        }
        if self.downsample.iter().any(|&f| f != 1 && f != 2) {
            return Err(Error::Config(format!(
                "downsample factors {:?} must each be 1 or 2",
                self.downsample
            )));
        }
        Ok(())
    }

    pub fn total_downsample(&self) -> usize {
        self.downsample.iter().product()
    }

    /// Shape of the trainable base kernel for stage `i`.
    pub fn base_shape(&self, i: usize, image_channels: usize) -> Vec<usize> {
        let k = self.kernel_size;
        if i == 0 {
            vec![self.stage_widths[0], image_channels, k, k]
        } else {
            vec![
                self.stage_widths[i],
                self.stage_widths[i - 1],
                self.group.order(),
                k,
                k,
            ]
        }
    }
}

/// Orientation-indexed activation as a concrete tensor, for inputs, test
/// oracles, and augmentation. Layout `[channels, orientations, height,
/// width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField<T: Scalar> {
    data: Tensor<T>,
}

impl<T: Scalar> FeatureField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "feature field wants [C,O,H,W], got {:?}",
                data.shape()
            )));
        }
        Ok(FeatureField { data })
    }

    /// Wrap a plain `[C,H,W]` image as a one-orientation field.
    pub fn from_image(image: Tensor<T>) -> Result<Self> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "image wants [C,H,W], got {:?}",
                s
            )));
        }
        let data = image.reshaped(vec![s[0], 1, s[1], s[2]])?;
        Ok(FeatureField { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn orientations(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }
    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    fn plane(&self, c: usize, o: usize) -> &[T] {
        let (h, w) = (self.height(), self.width());
        let base = (c * self.orientations() + o) * h * w;
        &self.data.values()[base..base + h * w]
    }
}

/// Quarter-turn counterclockwise rotations of the last two axes.
/// `[..., H, W]` becomes `[..., W, H]` per turn.
pub fn rot90_tensor<T: Scalar>(t: &Tensor<T>, turns: usize) -> Result<Tensor<T>> {
    let s = t.shape().to_vec();
    if s.len() < 2 {
        return Err(Error::Dimension(format!(
            "rot90 wants at least 2 axes, got {:?}",
            s
        )));
    }
    let mut cur = t.clone();
    for _ in 0..turns % 4 {
        let s = cur.shape().to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let v = cur.values();
        let mut out = vec![T::zero(); v.len()];
        for l in 0..lead {
            let src = &v[l * h * w..(l + 1) * h * w];
            let dst = &mut out[l * h * w..(l + 1) * h * w];
            // counterclockwise: out[i][j] = src[j][w-1-i]
            for i in 0..w {
                for j in 0..h {
                    dst[i * h + j] = src[j * w + (w - 1 - i)];
                }
            }
        }
        let mut ns = s.clone();
        let last = ns.len() - 1;
        ns.swap(last - 1, last);
        cur = Tensor::from_raw(ns, out);
    }
    Ok(cur)
}

/// Action of group element `r` on a field: spatial rotation of every plane
/// composed with a cyclic shift of the orientation axis. Identity on the
/// orientation axis when the field has a single slot.
pub fn rotate_field<T: Scalar>(
    spec: &GroupSpec,
    field: &FeatureField<T>,
    r: usize,
) -> Result<FeatureField<T>> {
    let turns = spec.quarter_turns(r)?;
    let (c, o, h, w) = (
        field.channels(),
        field.orientations(),
        field.height(),
        field.width(),
    );
    if h != w {
        return Err(Error::Geometry(format!(
            "field rotation needs square planes, got {}x{}",
            h, w
        )));
    }
    if o != 1 && o != spec.order() {
        return Err(Error::Dimension(format!(
            "field has {} orientation slots for group order {}",
            o,
            spec.order()
        )));
    }
    let shift = r % o;
    let mut out = vec![T::zero(); c * o * h * w];
    for ci in 0..c {
        for s in 0..o {
            let src_slot = (s + o - shift) % o;
            let plane = field.plane(ci, src_slot);
            let rotated = rot90_plane(plane, h, turns);
            let base = (ci * o + s) * h * w;
            out[base..base + h * w].copy_from_slice(&rotated);
        }
    }
    FeatureField::new(Tensor::from_raw(vec![c, o, h, w], out))
}

fn rot90_plane<T: Scalar>(src: &[T], side: usize, turns: usize) -> Vec<T> {
    let mut cur = src.to_vec();
    for _ in 0..turns % 4 {
        let mut next = vec![T::zero(); side * side];
        for i in 0..side {
            for j in 0..side {
                next[i * side + j] = cur[j * side + (side - 1 - i)];
            }
        }
        cur = next;
    }
    cur
}

// ── kernel rotation tables ───────────────────────────────────────────

/// One sparse row per target cell: `cell -> [(source cell, weight)]`.
type Rows = Vec<Vec<(usize, f64)>>;

fn rot90_rows(k: usize, turns: usize) -> Rows {
    // perm[target] = source for the accumulated rotation
    let mut perm: Vec<usize> = (0..k * k).collect();
    for _ in 0..turns % 4 {
        let prev = perm.clone();
        for i in 0..k {
            for j in 0..k {
                perm[i * k + j] = prev[j * k + (k - 1 - i)];
            }
        }
    }
    perm.into_iter().map(|s| vec![(s, 1.0)]).collect()
}

fn rot45_rows(k: usize) -> Rows {
    let c = (k as f64 - 1.0) / 2.0;
    let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut rows = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            // centered Cartesian coordinates, y pointing up
            let x = j as f64 - c;
            let y = c - i as f64;
            // sample the source at the point that rotates onto this cell
            let xs = (x + y) * half_sqrt2;
            let ys = (y - x) * half_sqrt2;
            let jj = c + xs;
            let ii = c - ys;
            let i0 = ii.floor();
            let j0 = jj.floor();
            let di = ii - i0;
            let dj = jj - j0;
            let mut row = Vec::new();
            for (oi, oj, wgt) in [
                (0.0, 0.0, (1.0 - di) * (1.0 - dj)),
                (0.0, 1.0, (1.0 - di) * dj),
                (1.0, 0.0, di * (1.0 - dj)),
                (1.0, 1.0, di * dj),
            ] {
                let si = i0 + oi;
                let sj = j0 + oj;
                if wgt > 0.0 && si >= 0.0 && sj >= 0.0 && (si as usize) < k && (sj as usize) < k {
                    row.push(((si as usize) * k + sj as usize, wgt));
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Spatial resampling rows for group element `r` acting on a k-by-k
/// stencil. Exact permutations wherever the angle is a quarter turn.
fn element_rows(spec: &GroupSpec, r: usize, k: usize) -> Rows {
    match spec.order() {
        8 => {
            let quarter = rot90_rows(k, (r / 2) % 4);
            if r % 2 == 0 {
                quarter
            } else {
                // route each target through the exact permutation, then
                // expand via the shared 45 degree bilinear stencil
                let diag = rot45_rows(k);
                quarter
                    .iter()
                    .map(|row| {
                        let (mid, w) = row[0];
                        diag[mid].iter().map(|&(s, w2)| (s, w * w2)).collect()
                    })
                    .collect()
            }
        }
        n => rot90_rows(k, (r * (4 / n)) % 4),
    }
}

fn push_rows(map: &mut GatherMap, rows: &[(usize, f64)], src_base: usize) {
    for &(cell, w) in rows {
        map.index.push(src_base + cell);
        map.weight.push(w);
    }
    map.offsets.push(map.index.len());
}

/// Gather map realizing the N rotated copies of a lifting kernel.
/// Base `[O, C, k, k]` expands to `[O*N, C, k, k]` with block `o*N + r`
/// holding the base filter of channel `o` rotated by element `r`.
pub fn lift_table(spec: &GroupSpec, out_ch: usize, in_ch: usize, k: usize) -> Arc<GatherMap> {
    let n = spec.order();
    let cell_rows: Vec<Rows> = (0..n).map(|r| element_rows(spec, r, k)).collect();
    let mut map = GatherMap {
        offsets: vec![0],
        index: Vec::new(),
        weight: Vec::new(),
    };
    for o in 0..out_ch {
        for r in 0..n {
            for c in 0..in_ch {
                let src_base = (o * in_ch + c) * k * k;
                for cell in 0..k * k {
                    push_rows(&mut map, &cell_rows[r][cell], src_base);
                }
            }
        }
    }
    Arc::new(map)
}

/// Gather map realizing a group-convolution filter bank. Base
/// `[O, C, N, k, k]` expands to `[O*N, C*N, k, k]`; the output block for
/// element `r` uses the base slice at input orientation `(s - r) mod N`,
/// spatially rotated by `r`.
pub fn group_table(spec: &GroupSpec, out_ch: usize, in_ch: usize, k: usize) -> Arc<GatherMap> {
    let n = spec.order();
    let cell_rows: Vec<Rows> = (0..n).map(|r| element_rows(spec, r, k)).collect();
    let mut map = GatherMap {
        offsets: vec![0],
        index: Vec::new(),
        weight: Vec::new(),
    };
    for o in 0..out_ch {
        for r in 0..n {
            for c in 0..in_ch {
                for s in 0..n {
                    let s_base = (s + n - r) % n;
                    let src_base = ((o * in_ch + c) * n + s_base) * k * k;
                    for cell in 0..k * k {
                        push_rows(&mut map, &cell_rows[r][cell], src_base);
                    }
                }
            }
        }
    }
    Arc::new(map)
}

// ── differentiable field operations ──────────────────────────────────

/// Tape-resident feature field: a graph variable plus its interpretation.
#[derive(Debug, Clone, Copy)]
pub struct Field {
    pub var: Var,
    pub channels: usize,
    pub orientations: usize,
    pub height: usize,
    pub width: usize,
}

impl Field {
    /// Register a concrete field as a constant input of the graph.
    pub fn input<T: Scalar>(g: &mut Graph<T>, field: &FeatureField<T>) -> Field {
        let (c, o, h, w) = (
            field.channels(),
            field.orientations(),
            field.height(),
            field.width(),
        );
        let var = g.leaf(field.data().clone());
        Field { var, channels: c, orientations: o, height: h, width: w }
    }

    /// Extract the concrete value after a forward pass.
    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> FeatureField<T> {
        FeatureField { data: g.value(self.var).clone() }
    }
}

/// Expand a lifting base kernel `[O, C, k, k]` into its realized bank
/// `[O*N, C, k, k]` on the tape. Gradients flow back to the base.
pub fn realize_lift<T: Scalar>(
    g: &mut Graph<T>,
    base: Var,
    spec: &GroupSpec,
    table: &Arc<GatherMap>,
) -> Result<Var> {
    let s = g.value(base).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "lift base wants [O,C,k,k], got {:?}",
            s
        )));
    }
    let n = spec.order();
    g.weighted_gather(base, table.clone(), vec![s[0] * n, s[1], s[2], s[3]])
}

/// Expand a group-convolution base `[O, C, N, k, k]` into `[O*N, C*N, k, k]`.
pub fn realize_group<T: Scalar>(
    g: &mut Graph<T>,
    base: Var,
    spec: &GroupSpec,
    table: &Arc<GatherMap>,
) -> Result<Var> {
    let s = g.value(base).shape().to_vec();
    let n = spec.order();
    if s.len() != 5 || s[2] != n {
        return Err(Error::Dimension(format!(
            "group base wants [O,C,{},k,k], got {:?}",
            n, s
        )));
    }
    g.weighted_gather(base, table.clone(), vec![s[0] * n, s[1] * n, s[3], s[4]])
}

/// Convolve a field with an already realized filter bank. The orientation
/// axis is folded into the channel axis for the spatial convolution and
/// restored afterwards.
pub fn field_conv<T: Scalar>(
    g: &mut Graph<T>,
    field: &Field,
    realized: Var,
    out_channels: usize,
    out_orientations: usize,
) -> Result<Field> {
    if field.height != field.width {
        return Err(Error::Geometry(format!(
            "equivariant convolution needs square input, got {}x{}",
            field.height, field.width
        )));
    }
    let flat = g.reshape(
        field.var,
        vec![field.channels * field.orientations, field.height, field.width],
    )?;
    let out = g.conv2d_same(flat, realized)?;
    let var = g.reshape(
        out,
        vec![out_channels, out_orientations, field.height, field.width],
    )?;
    Ok(Field {
        var,
        channels: out_channels,
        orientations: out_orientations,
        height: field.height,
        width: field.width,
    })
}

/// Lifting convolution: plain image to N orientation slots.
pub fn lift_conv<T: Scalar>(
    g: &mut Graph<T>,
    field: &Field,
    base: Var,
    spec: &GroupSpec,
    table: &Arc<GatherMap>,
) -> Result<Field> {
    if field.orientations != 1 {
        return Err(Error::Dimension(format!(
            "lift input must have one orientation slot, got {}",
            field.orientations
        )));
    }
    let out_ch = g.value(base).shape()[0];
    let realized = realize_lift(g, base, spec, table)?;
    field_conv(g, field, realized, out_ch, spec.order())
}

/// Group convolution: N-slot field to N-slot field.
pub fn group_conv<T: Scalar>(
    g: &mut Graph<T>,
    field: &Field,
    base: Var,
    spec: &GroupSpec,
    table: &Arc<GatherMap>,
) -> Result<Field> {
    if field.orientations != spec.order() {
        return Err(Error::Dimension(format!(
            "group convolution wants {} orientation slots, got {}",
            spec.order(),
            field.orientations
        )));
    }
    let out_ch = g.value(base).shape()[0];
    let realized = realize_group(g, base, spec, table)?;
    field_conv(g, field, realized, out_ch, spec.order())
}

/// Per-channel bias shared across orientations and pixels; sharing keeps
/// the bias invariant under the group action.
pub fn field_bias<T: Scalar>(g: &mut Graph<T>, field: &Field, bias: Var) -> Result<Field> {
    let var = g.add_channel_bias(field.var, bias, field.channels)?;
    Ok(Field { var, ..*field })
}

pub fn field_relu<T: Scalar>(g: &mut Graph<T>, field: &Field) -> Field {
    Field { var: g.relu(field.var), ..*field }
}

/// 2x average pooling of every orientation plane; factor 1 is a no-op.
pub fn field_downsample<T: Scalar>(g: &mut Graph<T>, field: &Field, factor: usize) -> Result<Field> {
    match factor {
        1 => Ok(*field),
        2 => {
            let flat = g.reshape(
                field.var,
                vec![field.channels * field.orientations, field.height, field.width],
            )?;
            let pooled = g.avg_pool2(flat)?;
            let (h, w) = (field.height / 2, field.width / 2);
            let var = g.reshape(pooled, vec![field.channels, field.orientations, h, w])?;
            Ok(Field { var, channels: field.channels, orientations: field.orientations, height: h, width: w })
        }
        f => Err(Error::Config(format!("unsupported downsample factor {}", f))),
    }
}

/// Mean over the orientation axis: the cyclic-shift-invariant projection
/// back to a single slot.
pub fn invariant_pool<T: Scalar>(g: &mut Graph<T>, field: &Field, spec: &GroupSpec) -> Result<Field> {
    if field.orientations != spec.order() {
        return Err(Error::Dimension(format!(
            "invariant pool wants {} orientation slots, got {}",
            spec.order(),
            field.orientations
        )));
    }
    let pooled = g.mean_axis(field.var, 1)?;
    let var = g.reshape(pooled, vec![field.channels, 1, field.height, field.width])?;
    Ok(Field { var, channels: field.channels, orientations: 1, height: field.height, width: field.width })
}

/// Realized per-stage filter banks plus biases, built once per pass and
/// shared by every image in a batch.
pub struct RealizedBackbone {
    pub stages: Vec<(Var, Var)>,
}

/// Expand all stage kernels. `params[i]` is `(base, bias)` for stage `i`,
/// `tables[i]` the matching rotation table.
pub fn realize_backbone<T: Scalar>(
    g: &mut Graph<T>,
    params: &[(Var, Var)],
    tables: &[Arc<GatherMap>],
    cfg: &BackboneConfig,
) -> Result<RealizedBackbone> {
    if params.len() != cfg.stage_widths.len() || tables.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameter stages, {} tables, config has {}",
            params.len(),
            tables.len(),
            cfg.stage_widths.len()
        )));
    }
    let mut stages = Vec::with_capacity(params.len());
    for (i, &(base, bias)) in params.iter().enumerate() {
        let kernel = if i == 0 {
            realize_lift(g, base, &cfg.group, &tables[i])?
        } else {
            realize_group(g, base, &cfg.group, &tables[i])?
        };
        stages.push((kernel, bias));
    }
    Ok(RealizedBackbone { stages })
}

/// Full encoder: lift, then group-convolution stages with relu and
/// optional pooling, then the orientation-invariant projection. Output is
/// a one-slot spatial map at side `input_side / total_downsample`.
pub fn encode_realized<T: Scalar>(
    g: &mut Graph<T>,
    image: &Field,
    realized: &RealizedBackbone,
    cfg: &BackboneConfig,
) -> Result<Field> {
    if image.orientations != 1 {
        return Err(Error::Dimension(format!(
            "encoder input must have one orientation slot, got {}",
            image.orientations
        )));
    }
    if image.height != image.width {
        return Err(Error::Geometry(format!(
            "encoder input must be square, got {}x{}",
            image.height, image.width
        )));
    }
    if image.height % cfg.total_downsample() != 0 {
        return Err(Error::Geometry(format!(
            "input side {} not divisible by total downsample {}",
            image.height,
            cfg.total_downsample()
        )));
    }
    let n = cfg.group.order();
    let mut field = *image;
    for (i, &(kernel, bias)) in realized.stages.iter().enumerate() {
        field = field_conv(g, &field, kernel, cfg.stage_widths[i], n)?;
        field = field_bias(g, &field, bias)?;
        field = field_relu(g, &field);
        field = field_downsample(g, &field, cfg.downsample[i])?;
    }
    invariant_pool(g, &field, &cfg.group)
}

/// Single-image encode; batch callers should realize once and reuse.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    image: &Field,
    params: &[(Var, Var)],
    tables: &[Arc<GatherMap>],
    cfg: &BackboneConfig,
) -> Result<Field> {
    let realized = realize_backbone(g, params, tables, cfg)?;
    encode_realized(g, image, &realized, cfg)
}

/// Rotation tables for every stage of a backbone.
pub fn backbone_tables(cfg: &BackboneConfig, image_channels: usize) -> Vec<Arc<GatherMap>> {
    let k = cfg.kernel_size;
    (0..cfg.stage_widths.len())
        .map(|i| {
            if i == 0 {
                lift_table(&cfg.group, cfg.stage_widths[0], image_channels, k)
            } else {
                group_table(&cfg.group, cfg.stage_widths[i], cfg.stage_widths[i - 1], k)
            }
        })
        .collect()
}
