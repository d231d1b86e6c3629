//! Analytic activation memory and parameter counts from a layer list.
//!
//! Text format, one layer per line (`#` starts a comment):
//!
//! ```text
//! input 1 256 256          # channels, then 2 or 3 spatial extents
//! batch 4
//! conv 64 k=3 s=1          # out channels, kernel, stride
//! norm
//! e0: relu                 # `name:` labels the layer's output
//! maxpool 2
//! up: upsample 2
//! concat with=e0           # append channels of labelled tensors
//! add with=skip
//! conv 8 k=1 from=e0       # `from=` reads a labelled tensor instead of the previous one
//! apool 16 16              # adaptive average pool to the given extents
//! attend 48 64 64          # replace the current tensor with gathered context [C, spatial..]
//! broadcast 64             # append a spatially constant C-channel plane
//! gap                      # global average pool
//! x:                       # label the current tensor without a layer
//! ```
//!
//! Every layer accepts `mem=0` / `mem=1` to override the counting rule.
//! By default conv and norm outputs count, plus a relu directly after a norm.
//! Each counted tensor is stored with its gradient at 4 bytes per element.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::Error;
use crate::model::{ScaaConfig, Variant};

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
    },
    Norm,
    Relu,
    Sigmoid,
    MaxPool(usize),
    AvgPool(usize),
    AdaptivePool(Vec<usize>),
    Upsample(usize),
    Concat(Vec<String>),
    Add(String),
    Gap,
    Attend(Vec<usize>),
    Broadcast(usize),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Norm => "norm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::AvgPool(_) => "avgpool",
            LayerKind::AdaptivePool(_) => "apool",
            LayerKind::Upsample(_) => "upsample",
            LayerKind::Concat(_) => "concat",
            LayerKind::Add(_) => "add",
            LayerKind::Gap => "gap",
            LayerKind::Attend(_) => "attend",
            LayerKind::Broadcast(_) => "broadcast",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub label: Option<String>,
    pub from: Option<String>,
    /// `None` applies the default counting rule.
    pub mem: Option<bool>,
    /// Source line, for error messages. `0` for programmatic layers.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Layer(Layer),
    /// Labels the current tensor.
    Mark(String, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    /// `[C, spatial..]`.
    pub input: Vec<usize>,
    pub batch: usize,
    pub items: Vec<Item>,
}

/// One resolved layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub kind: &'static str,
    pub label: Option<String>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub flagged: bool,
}

impl LayerReport {
    pub fn elements(&self) -> usize {
        self.out_shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemReport {
    pub name: String,
    pub batch: usize,
    pub layers: Vec<LayerReport>,
}

impl MemReport {
    /// Counted elements for one batch item.
    pub fn flagged_elements(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.flagged)
            .map(LayerReport::elements)
            .sum()
    }

    /// Value and gradient of every counted tensor, 32-bit, whole batch.
    pub fn bytes(&self) -> u64 {
        self.flagged_elements() as u64 * 2 * 4 * self.batch as u64
    }

    pub fn gib(&self) -> f64 {
        self.bytes() as f64 / GIB
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (batch {})", self.name, self.batch);
        let _ = writeln!(
            s,
            "{:>4}  {:<10} {:<24} {:>14} {:>10}  mem",
            "#", "layer", "output", "elements", "params"
        );
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>4}  {:<10} {:<24} {:>14} {:>10}  {}",
                i,
                l.kind,
                shape_str(&l.out_shape),
                l.elements(),
                l.params,
                if l.flagged { "*" } else { "" }
            );
        }
        let _ = writeln!(
            s,
            "counted elements/item {}  bytes {}  GiB {:.4}  params {}",
            self.flagged_elements(),
            self.bytes(),
            self.gib(),
            self.params()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,layer,label,output,elements,params,flagged\n");
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                i,
                l.kind,
                l.label.as_deref().unwrap_or(""),
                shape_str(&l.out_shape),
                l.elements(),
                l.params,
                l.flagged as u8
            );
        }
        s
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, Error> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("bad {what} '{tok}'")))
}

fn positive(tok: &str, line: usize, what: &str) -> Result<usize, Error> {
    let v: usize = num(tok, line, what)?;
    if v == 0 {
        return Err(Error::parse(line, format!("{what} must be >= 1")));
    }
    Ok(v)
}

fn is_label(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl ArchSpec {
    pub fn parse(name: &str, text: &str) -> Result<Self, Error> {
        let mut input = None;
        let mut batch = 1;
        let mut items = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks: Vec<&str> = line.split_whitespace().collect();
            let mut label = None;
            if let Some(l) = toks[0].strip_suffix(':') {
                if !is_label(l) {
                    return Err(Error::parse(n, format!("bad label '{l}'")));
                }
                label = Some(l.to_string());
                toks.remove(0);
                if toks.is_empty() {
                    items.push(Item::Mark(l.to_string(), n));
                    continue;
                }
            }
            let (word, rest) = (toks[0], &toks[1..]);
            let mut pos = Vec::new();
            let mut opts: HashMap<&str, &str> = HashMap::new();
            for t in rest {
                match t.split_once('=') {
                    Some((k, v)) => {
                        if opts.insert(k, v).is_some() {
                            return Err(Error::parse(n, format!("option '{k}' given twice")));
                        }
                    }
                    None => pos.push(*t),
                }
            }
            let want = |count: usize| -> Result<(), Error> {
                if pos.len() != count {
                    return Err(Error::parse(
                        n,
                        format!(
                            "'{word}' takes {count} positional argument(s), got {}",
                            pos.len()
                        ),
                    ));
                }
                Ok(())
            };
            match word {
                "input" => {
                    if label.is_some() || !opts.is_empty() {
                        return Err(Error::parse(n, "input takes no label or options"));
                    }
                    if !(3..=4).contains(&pos.len()) {
                        return Err(Error::parse(
                            n,
                            "input needs channels and 2 or 3 spatial extents",
                        ));
                    }
                    if input.is_some() {
                        return Err(Error::parse(n, "input given twice"));
                    }
                    input = Some(
                        pos.iter()
                            .map(|t| positive(t, n, "extent"))
                            .collect::<Result<Vec<_>, _>>()?,
                    );
                    continue;
                }
                "batch" => {
                    want(1)?;
                    batch = positive(pos[0], n, "batch")?;
                    continue;
                }
                _ => {}
            }
            let mut take = |k: &str| opts.remove(k);
            let from = take("from").map(str::to_string);
            let mem = match take("mem") {
                None => None,
                Some("0") => Some(false),
                Some("1") => Some(true),
                Some(v) => return Err(Error::parse(n, format!("mem must be 0 or 1, got '{v}'"))),
            };
            let kind = match word {
                "conv" => {
                    want(1)?;
                    let out = positive(pos[0], n, "channels")?;
                    let kernel = take("k").map_or(Ok(3), |v| positive(v, n, "kernel"))?;
                    let stride = take("s").map_or(Ok(1), |v| positive(v, n, "stride"))?;
                    LayerKind::Conv {
                        out,
                        kernel,
                        stride,
                    }
                }
                "norm" | "relu" | "sigmoid" | "gap" => {
                    want(0)?;
                    match word {
                        "norm" => LayerKind::Norm,
                        "relu" => LayerKind::Relu,
                        "sigmoid" => LayerKind::Sigmoid,
                        _ => LayerKind::Gap,
                    }
                }
                "maxpool" | "avgpool" | "upsample" => {
                    want(1)?;
                    let f = positive(pos[0], n, "factor")?;
                    match word {
                        "maxpool" => LayerKind::MaxPool(f),
                        "avgpool" => LayerKind::AvgPool(f),
                        _ => LayerKind::Upsample(f),
                    }
                }
                "apool" => {
                    if pos.is_empty() {
                        return Err(Error::parse(n, "apool needs target extents"));
                    }
                    LayerKind::AdaptivePool(
                        pos.iter()
                            .map(|t| positive(t, n, "extent"))
                            .collect::<Result<_, _>>()?,
                    )
                }
                "attend" => {
                    if pos.len() < 3 {
                        return Err(Error::parse(n, "attend needs channels and spatial extents"));
                    }
                    LayerKind::Attend(
                        pos.iter()
                            .map(|t| positive(t, n, "extent"))
                            .collect::<Result<_, _>>()?,
                    )
                }
                "broadcast" => {
                    want(1)?;
                    LayerKind::Broadcast(positive(pos[0], n, "channels")?)
                }
                "concat" | "add" => {
                    want(0)?;
                    let with = take("with")
                        .ok_or_else(|| Error::parse(n, format!("{word} needs with=LABEL")))?;
                    let labels: Vec<String> = with.split(',').map(str::to_string).collect();
                    if labels.iter().any(|l| !is_label(l)) {
                        return Err(Error::parse(n, format!("bad label list '{with}'")));
                    }
                    if word == "add" {
                        if labels.len() != 1 {
                            return Err(Error::parse(n, "add takes exactly one label"));
                        }
                        LayerKind::Add(labels[0].clone())
                    } else {
                        LayerKind::Concat(labels)
                    }
                }
                other => return Err(Error::parse(n, format!("unknown layer '{other}'"))),
            };
            if let Some(k) = opts.keys().next() {
                return Err(Error::parse(n, format!("unknown option '{k}' for {word}")));
            }
            items.push(Item::Layer(Layer {
                kind,
                label,
                from,
                mem,
                line: n,
            }));
        }
        let input = input.ok_or_else(|| Error::parse(0, "missing input line"))?;
        let spec = Self {
            name: name.to_string(),
            input,
            batch,
            items,
        };
        spec.resolve()?;
        Ok(spec)
    }

    pub fn dims(&self) -> usize {
        self.input.len() - 1
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "input {}",
            self.input
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        );
        let _ = writeln!(s, "batch {}", self.batch);
        for item in &self.items {
            let l = match item {
                Item::Mark(name, _) => {
                    let _ = writeln!(s, "{name}:");
                    continue;
                }
                Item::Layer(l) => l,
            };
            if let Some(label) = &l.label {
                let _ = write!(s, "{label}: ");
            }
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            let body = match &l.kind {
                LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                } => {
                    let mut b = format!("conv {out} k={kernel}");
                    if *stride != 1 {
                        let _ = write!(b, " s={stride}");
                    }
                    b
                }
                LayerKind::MaxPool(f) | LayerKind::AvgPool(f) | LayerKind::Upsample(f) => {
                    format!("{} {f}", l.kind.name())
                }
                LayerKind::AdaptivePool(t) | LayerKind::Attend(t) => {
                    format!("{} {}", l.kind.name(), join(t))
                }
                LayerKind::Broadcast(c) => format!("broadcast {c}"),
                LayerKind::Concat(with) => format!("concat with={}", with.join(",")),
                LayerKind::Add(with) => format!("add with={with}"),
                k => k.name().to_string(),
            };
            s.push_str(&body);
            if let Some(f) = &l.from {
                let _ = write!(s, " from={f}");
            }
            if let Some(m) = l.mem {
                let _ = write!(s, " mem={}", m as u8);
            }
            s.push('\n');
        }
        s
    }

    /// Propagates shapes through the list, checking every link.
    pub fn resolve(&self) -> Result<Vec<LayerReport>, Error> {
        let dims = self.dims();
        if !(2..=3).contains(&dims) {
            return Err(Error::Config(format!(
                "input must have 2 or 3 spatial extents, got {}",
                dims
            )));
        }
        let mut labels: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut cur = self.input.clone();
        let mut prev_norm = false;
        let mut out = Vec::new();
        let lookup = |labels: &HashMap<&str, Vec<usize>>,
                      name: &str,
                      line: usize|
         -> Result<Vec<usize>, Error> {
            labels
                .get(name)
                .cloned()
                .ok_or_else(|| Error::parse(line, format!("unknown label '{name}'")))
        };
        for item in &self.items {
            let l = match item {
                Item::Mark(name, _) => {
                    labels.insert(name, cur.clone());
                    continue;
                }
                Item::Layer(l) => l,
            };
            let n = l.line;
            let chain = |msg: String| Error::parse(n, format!("shape chain broken: {msg}"));
            let input = match &l.from {
                Some(f) => {
                    prev_norm = false;
                    lookup(&labels, f, n)?
                }
                None => cur.clone(),
            };
            let c = input[0];
            let spatial = &input[1..];
            let mut params = 0;
            let output = match &l.kind {
                LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                } => {
                    params = out * c * kernel.pow(dims as u32) + out;
                    let mut s = vec![*out];
                    s.extend(spatial.iter().map(|&e| e.div_ceil(*stride)));
                    s
                }
                LayerKind::Norm => {
                    params = 2 * c;
                    input.clone()
                }
                LayerKind::Relu | LayerKind::Sigmoid => input.clone(),
                LayerKind::MaxPool(f) | LayerKind::AvgPool(f) => {
                    if let Some(e) = spatial.iter().find(|&&e| e % f != 0) {
                        return Err(chain(format!("extent {e} not divisible by pool {f}")));
                    }
                    let mut s = vec![c];
                    s.extend(spatial.iter().map(|&e| e / f));
                    s
                }
                LayerKind::AdaptivePool(t) => {
                    if t.len() > spatial.len() {
                        return Err(chain(format!(
                            "apool target {t:?} has more axes than {spatial:?}"
                        )));
                    }
                    let lead = spatial.len() - t.len();
                    let mut s = input[..1 + lead].to_vec();
                    for (&e, &target) in spatial[lead..].iter().zip(t) {
                        if target > e {
                            return Err(chain(format!("apool target {target} exceeds extent {e}")));
                        }
                        s.push(target);
                    }
                    s
                }
                LayerKind::Upsample(f) => {
                    let mut s = vec![c];
                    for &e in spatial {
                        s.push(
                            e.checked_mul(*f)
                                .ok_or_else(|| chain("upsample overflows".into()))?,
                        );
                    }
                    s
                }
                LayerKind::Concat(with) => {
                    let mut ch = c;
                    for w in with {
                        let other = lookup(&labels, w, n)?;
                        if other[1..] != *spatial {
                            return Err(chain(format!(
                                "concat with '{w}' {:?} vs {:?}",
                                &other[1..],
                                spatial
                            )));
                        }
                        ch += other[0];
                    }
                    let mut s = vec![ch];
                    s.extend_from_slice(spatial);
                    s
                }
                LayerKind::Add(w) => {
                    let other = lookup(&labels, w, n)?;
                    if other != input {
                        return Err(chain(format!("add with '{w}' {other:?} vs {input:?}")));
                    }
                    input.clone()
                }
                LayerKind::Gap => {
                    let mut s = vec![c];
                    s.extend(spatial.iter().map(|_| 1));
                    s
                }
                LayerKind::Attend(shape) => shape.clone(),
                LayerKind::Broadcast(extra) => {
                    let mut s = vec![c + extra];
                    s.extend_from_slice(spatial);
                    s
                }
            };
            if output
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .is_none()
            {
                return Err(chain("tensor size overflows".into()));
            }
            let default = match l.kind {
                LayerKind::Conv { .. } | LayerKind::Norm => true,
                LayerKind::Relu => prev_norm,
                _ => false,
            };
            prev_norm = matches!(l.kind, LayerKind::Norm);
            if let Some(label) = &l.label {
                labels.insert(label, output.clone());
            }
            out.push(LayerReport {
                kind: l.kind.name(),
                label: l.label.clone(),
                in_shape: input,
                out_shape: output.clone(),
                params,
                flagged: l.mem.unwrap_or(default),
            });
            cur = output;
        }
        Ok(out)
    }
}

pub fn estimate(spec: &ArchSpec) -> Result<MemReport, Error> {
    Ok(MemReport {
        name: spec.name.clone(),
        batch: spec.batch,
        layers: spec.resolve()?,
    })
}

pub fn count_params(spec: &ArchSpec) -> Result<usize, Error> {
    Ok(estimate(spec)?.params())
}

/// Emits layer-list text.
struct Text(String);

impl Text {
    fn new(input: &[usize], batch: usize) -> Self {
        let dims: Vec<String> = input.iter().map(usize::to_string).collect();
        Self(format!("input {}\nbatch {batch}\n", dims.join(" ")))
    }

    fn line(&mut self, l: impl AsRef<str>) {
        self.0.push_str(l.as_ref());
        self.0.push('\n');
    }

    fn unit(&mut self, c: usize, label: Option<&str>) {
        self.line(format!("conv {c} k=3"));
        self.line("norm");
        match label {
            Some(l) => self.line(format!("{l}: relu")),
            None => self.line("relu"),
        }
    }

    fn residual(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.line(format!("{name}_in:"));
        self.unit(c_out, None);
        self.unit(c_out, Some(&format!("{name}_main")));
        if c_in != c_out {
            self.line(format!("conv {c_out} k=1 from={name}_in"));
            self.line(format!("add with={name}_main"));
        } else {
            self.line(format!("add with={name}_in"));
        }
    }
}

pub const CLASSES: usize = 9;
pub const INPUT: usize = 256;
const UNET2D: [usize; 5] = [64, 128, 256, 512, 1024];
const UNET3D: [usize; 5] = [16, 32, 64, 128, 256];

fn unet_text(widths: [usize; 5], dims: usize, batch: usize, half_first: bool) -> String {
    let mut input = vec![1];
    input.extend(std::iter::repeat_n(INPUT, dims));
    let mut t = Text::new(&input, batch);
    for (s, &c) in widths.iter().enumerate() {
        if s > 0 {
            t.line("maxpool 2");
        }
        t.unit(if half_first { c / 2 } else { c }, None);
        t.unit(c, Some(&format!("e{s}")));
    }
    for s in (0..4).rev() {
        t.line("upsample 2");
        t.line(format!("concat with=e{s}"));
        t.unit(widths[s], None);
        t.unit(widths[s], None);
    }
    t.line(format!("conv {CLASSES} k=1"));
    t.line("sigmoid");
    t.0
}

/// Context encoder of `c` on an `input`³ volume.
pub fn scaa_3d_text(c: &ScaaConfig, input: usize) -> String {
    let mut t = Text::new(&[1, input, input, input], 1);
    t.line(format!("avgpool {}", c.downsample));
    t.residual("stem", 1, c.c3d[0]);
    t.line("maxpool 2");
    let mut prev = c.c3d[0];
    for s in 0..3 {
        t.residual(&format!("s{s}a"), prev, c.c3d[s]);
        t.residual(&format!("s{s}b"), c.c3d[s], c.c3d[s]);
        t.line(format!("f{s}:"));
        t.line("maxpool 2");
        prev = c.c3d[s];
    }
    t.line("f3:");
    if c.variant.attends() {
        for s in 0..4 {
            let e = input / (c.downsample << (s + 1));
            let p = c.pool[s].min(e);
            t.line(format!("conv {} k=1 from=f{s}", c.heads[s] * c.embed[s]));
            t.line(format!("apool {p} {p}"));
        }
    }
    if c.variant.uses_globe() {
        t.line("gap from=f3");
    }
    t.line(format!("conv {} k=1 from=f3", c.num_classes));
    t.line("upsample 16");
    t.line("sigmoid");
    t.0
}

/// Per-slice 2D path (encoder, fusion, decoder) of `c` on `input`² slices.
pub fn scaa_2d_text(c: &ScaaConfig, input: usize, batch: usize) -> String {
    let mut t = Text::new(&[1, input, input], batch);
    for s in 0..5 {
        if s > 0 {
            t.line("maxpool 2");
        }
        t.unit(c.c2d[s], None);
        t.unit(c.c2d[s], Some(&format!("e{s}")));
    }
    let mut feats = vec!["e0".to_string()];
    for s in 0..4 {
        if !c.variant.fuses() {
            feats.push(format!("e{}", s + 1));
            continue;
        }
        let e = input / (c.downsample << (s + 1));
        let c3 = c.c3d[s];
        if c.variant.attends() {
            let p = c.pool[s].min(e);
            t.line(format!(
                "conv {} k=1 from=e{}",
                c.heads[s] * c.embed[s],
                s + 1
            ));
            t.line(format!("apool {p} {p}"));
            t.line(format!("attend {} {e} {e}", c.heads[s] * c3));
            t.line(format!("conv {c3} k=1"));
        } else {
            t.line(format!("attend {c3} {e} {e}"));
        }
        t.line(format!("upsample {}", c.downsample));
        t.line(format!("concat with=e{}", s + 1));
        t.unit(c.fused[s + 1], None);
        t.unit(c.fused[s + 1], Some(&format!("f{}", s + 1)));
        feats.push(format!("f{}", s + 1));
    }
    t.line(format!("upsample 2 from={}", feats[4]));
    for s in (0..4).rev() {
        if s < 3 {
            t.line("upsample 2");
        }
        t.line(format!("concat with={}", feats[s]));
        t.unit(c.feature_channels(s), None);
    }
    if c.variant.uses_globe() {
        t.line(format!("broadcast {}", c.c3d[3]));
    }
    t.line(format!("conv {} k=1", c.num_classes));
    t.line("sigmoid");
    t.0
}

pub const BUILTINS: [&str; 4] = ["unet2d", "unet3d", "scaa3dEncoder", "scaa2dPath"];

pub fn full_scaa() -> ScaaConfig {
    ScaaConfig::full(CLASSES).with_variant(Variant::Scaa)
}

pub fn builtin_text(name: &str, batch: usize) -> Result<String, Error> {
    Ok(match name {
        "unet2d" => unet_text(UNET2D, 2, batch, false),
        "unet3d" => unet_text(UNET3D, 3, batch, true),
        "scaa3dEncoder" => {
            let mut s = scaa_3d_text(&full_scaa(), INPUT);
            if batch != 1 {
                s = s.replacen("batch 1", &format!("batch {batch}"), 1);
            }
            s
        }
        "scaa2dPath" => scaa_2d_text(&full_scaa(), INPUT, batch),
        other => {
            return Err(Error::Config(format!(
                "unknown architecture '{other}' (known: {})",
                BUILTINS.join(", ")
            )))
        }
    })
}

pub fn builtin_arch(name: &str, batch: usize) -> Result<ArchSpec, Error> {
    ArchSpec::parse(name, &builtin_text(name, batch)?)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub name: &'static str,
    pub batch: usize,
    pub gib: f64,
    pub target_gib: f64,
    pub params: Option<usize>,
    pub target_params: Option<f64>,
}

impl TableRow {
    pub fn mem_dev(&self) -> f64 {
        self.gib / self.target_gib - 1.0
    }

    pub fn param_dev(&self) -> Option<f64> {
        Some(self.params? as f64 / self.target_params? - 1.0)
    }
}

/// Builtin estimates next to the reference figures.
pub fn reference_table() -> Result<Vec<TableRow>, Error> {
    let u2 = estimate(&builtin_arch("unet2d", 4)?)?;
    let u3 = estimate(&builtin_arch("unet3d", 1)?)?;
    let e3 = estimate(&builtin_arch("scaa3dEncoder", 1)?)?;
    let p2 = estimate(&builtin_arch("scaa2dPath", 4)?)?;
    Ok(vec![
        TableRow {
            name: "unet2d",
            batch: 4,
            gib: u2.gib(),
            target_gib: 2.86,
            params: Some(u2.params()),
            target_params: Some(34.51e6),
        },
        TableRow {
            name: "unet3d",
            batch: 1,
            gib: u3.gib(),
            target_gib: 27.96,
            params: Some(u3.params()),
            target_params: None,
        },
        TableRow {
            name: "scaa3dEncoder",
            batch: 1,
            gib: e3.gib(),
            target_gib: 3.22,
            params: Some(e3.params()),
            target_params: None,
        },
        TableRow {
            name: "scaa2dPath",
            batch: 4,
            gib: p2.gib(),
            target_gib: 2.13,
            params: Some(p2.params()),
            target_params: None,
        },
        TableRow {
            name: "scaa",
            batch: 0,
            gib: e3.gib() + p2.gib(),
            target_gib: 5.35,
            params: Some(e3.params() + p2.params()),
            target_params: Some(7.82e6),
        },
    ])
}

pub fn table_text(rows: &[TableRow]) -> String {
    let mut s = format!(
        "{:<14} {:>5} {:>10} {:>8} {:>7} {:>12} {:>10} {:>7}\n",
        "arch", "batch", "GiB", "ref", "dev", "params", "ref", "dev"
    );
    for r in rows {
        let batch = if r.batch == 0 {
            "1+4".to_string()
        } else {
            r.batch.to_string()
        };
        let params = r.params.map_or("-".into(), |p| p.to_string());
        let tp = r
            .target_params
            .map_or("-".into(), |p| format!("{:.2}M", p / 1e6));
        let pd = r
            .param_dev()
            .map_or("-".into(), |d| format!("{:+.1}%", d * 100.0));
        let _ = writeln!(
            s,
            "{:<14} {:>5} {:>10.3} {:>8.2} {:>6.1}% {:>12} {:>10} {:>7}",
            r.name,
            batch,
            r.gib,
            r.target_gib,
            r.mem_dev() * 100.0,
            params,
            tp,
            pd
        );
    }
    s.push_str(
        "note: scaa block internals are not fully pinned down; residual 3D blocks are two conv-norm-relu units \
         with a 1x1 projection skip, fusion uses two conv-norm-relu units and decoder scales one, \
         which lands below the reference parameter count.\n",
    );
    s
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("arch,batch,gib,ref_gib,params,ref_params\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{}",
            r.name,
            if r.batch == 0 {
                "1+4".into()
            } else {
                r.batch.to_string()
            },
            r.gib,
            r.target_gib,
            r.params.map_or(String::new(), |p| p.to_string()),
            r.target_params.map_or(String::new(), |p| p.to_string())
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_parameters;

    #[test]
    fn single_conv_bytes() {
        let spec = ArchSpec::parse("one", "input 1 256 256\nconv 64 k=3").unwrap();
        assert_eq!(estimate(&spec).unwrap().bytes(), 64 * 256 * 256 * 2 * 4);
        assert_eq!(estimate(&spec).unwrap().bytes(), 32 << 20);
    }

    #[test]
    fn small_conv_params() {
        let spec = ArchSpec::parse("p", "input 2 8 8\nconv 4 k=3").unwrap();
        assert_eq!(count_params(&spec).unwrap(), 76);
    }

    #[test]
    fn relu_counts_only_after_norm() {
        let spec = ArchSpec::parse(
            "r",
            "input 1 4 4\nconv 2\nrelu\nnorm\nrelu\nmaxpool 2\nrelu",
        )
        .unwrap();
        let flags: Vec<bool> = estimate(&spec)
            .unwrap()
            .layers
            .iter()
            .map(|l| l.flagged)
            .collect();
        assert_eq!(flags, [true, false, true, true, false, false]);
    }

    #[test]
    fn chain_breaks_are_reported_with_line() {
        let err = ArchSpec::parse("x", "input 1 6 6\nmaxpool 4").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err =
            ArchSpec::parse("x", "input 1 8 8\na: conv 2\nmaxpool 2\nconcat with=a").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        assert!(ArchSpec::parse("x", "conv 2").is_err());
    }

    #[test]
    fn deepest_shapes() {
        let u2 = estimate(&builtin_arch("unet2d", 1).unwrap()).unwrap();
        assert!(u2
            .layers
            .iter()
            .any(|l| l.label.as_deref() == Some("e4") && l.out_shape == [1024, 16, 16]));
        let u3 = estimate(&builtin_arch("unet3d", 1).unwrap()).unwrap();
        assert!(u3
            .layers
            .iter()
            .any(|l| l.label.as_deref() == Some("e4") && l.out_shape == [256, 16, 16, 16]));
        let e3 = estimate(&builtin_arch("scaa3dEncoder", 1).unwrap()).unwrap();
        let first = e3.layers.iter().find(|l| l.flagged).unwrap();
        assert_eq!(&first.out_shape[1..], &[128, 128, 128]);
    }

    #[test]
    fn text_round_trip() {
        for name in BUILTINS {
            let spec = builtin_arch(name, 2).unwrap();
            let again = ArchSpec::parse(name, &spec.to_text()).unwrap();
            assert_eq!(estimate(&again).unwrap(), estimate(&spec).unwrap());
        }
    }

    #[test]
    fn scaa_params_match_the_model_for_every_variant() {
        for v in Variant::ALL {
            for c in [
                ScaaConfig::full(CLASSES),
                ScaaConfig::desk(3),
                ScaaConfig::micro(2),
            ] {
                let c = c.with_variant(v);
                let e3 = ArchSpec::parse("e", &scaa_3d_text(&c, 64)).unwrap();
                let p2 = ArchSpec::parse("p", &scaa_2d_text(&c, 64, 1)).unwrap();
                assert_eq!(
                    count_params(&e3).unwrap() + count_params(&p2).unwrap(),
                    count_parameters(&c),
                    "{v:?}"
                );
            }
        }
    }

    #[test]
    fn batch_scales_bytes_exactly() {
        for name in BUILTINS {
            let one = estimate(&builtin_arch(name, 1).unwrap()).unwrap().bytes();
            let two = estimate(&builtin_arch(name, 2).unwrap()).unwrap().bytes();
            assert_eq!(two, 2 * one);
        }
    }
}
