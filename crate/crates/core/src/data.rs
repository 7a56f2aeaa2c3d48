//! Procedural 3D-caption corpus: six coloured primitives sampled on their
//! surfaces, templated instructions and responses, JSONL manifests.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spc1, PointCloud};
use crate::seed;
use crate::tensor::Tensor;
use crate::text;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::invalid(format!(concat!("unknown ", stringify!($name), " `{}`"), other))),
                }
            }
        }
    };
}

word_enum!(Shape {
    Sphere => "sphere",
    Cube => "cube",
    Cylinder => "cylinder",
    Cone => "cone",
    Torus => "torus",
    Pyramid => "pyramid",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    White => "white",
    Black => "black",
});

word_enum!(Size {
    Small => "small",
    Large => "large",
});

word_enum!(Task {
    Caption => "caption",
    Classify => "classify",
    Qa => "qa",
});

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }
}

impl Size {
    pub fn scale(self) -> f64 {
        match self {
            Size::Small => 0.5,
            Size::Large => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub color: Color,
    pub scale: f64,
    pub n_points: usize,
    pub noise: f64,
    pub seed: u64,
}

const INLINE_PREFIX: &str = "shape:";

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 8 {
            return Err(Error::invalid("shape needs at least 8 points"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("shape noise must be finite and non-negative"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("shape scale must be positive"));
        }
        Ok(())
    }

    /// Inline cloud reference `shape:<shape>/<color>/<scale>/<n>/<noise>/<seed>`.
    pub fn to_ref(&self) -> String {
        format!(
            "{INLINE_PREFIX}{}/{}/{}/{}/{}/{}",
            self.shape, self.color, self.scale, self.n_points, self.noise, self.seed
        )
    }

    pub fn from_ref(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix(INLINE_PREFIX)
            .ok_or_else(|| Error::invalid(format!("`{s}` is not an inline shape reference")))?;
        let parts: Vec<&str> = body.split('/').collect();
        if parts.len() != 6 {
            return Err(Error::invalid(format!("inline shape `{s}` needs 6 fields")));
        }
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad number `{}` in `{s}`", parts[i])))
        };
        let int = |i: usize| -> Result<u64> {
            parts[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad integer `{}` in `{s}`", parts[i])))
        };
        let spec = ShapeSpec {
            shape: parts[0].parse()?,
            color: parts[1].parse()?,
            scale: num(2)?,
            n_points: int(3)? as usize,
            noise: num(4)?,
            seed: int(5)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

type P3 = [f64; 3];

fn lerp3(a: P3, b: P3, c: P3, u: f64, v: f64) -> P3 {
    // uniform point in triangle abc
    let su = u.sqrt();
    let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
    [0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i])
}

fn tri_area(a: P3, b: P3, c: P3) -> f64 {
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Pick an index with probability proportional to `weights`.
fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn surface_point<R: Rng>(shape: Shape, s: f64, rng: &mut R) -> P3 {
    use std::f64::consts::TAU;
    match shape {
        Shape::Sphere => loop {
            let v: P3 = [0; 3].map(|_| StandardNormal.sample(&mut *rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break v.map(|x| s * x / n);
            }
        },
        Shape::Cube => {
            let face = rng.random_range(0..6);
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            let mut p = [0.0; 3];
            for (i, v) in p.iter_mut().enumerate() {
                *v = if i == axis { sign * s } else { s * (2.0 * rng.random::<f64>() - 1.0) };
            }
            p
        }
        Shape::Cylinder => {
            // radius s, height 2s: side area 4πs², each cap πs²
            let part = pick(&[4.0, 1.0, 1.0], rng);
            let t = TAU * rng.random::<f64>();
            match part {
                0 => [s * t.cos(), s * t.sin(), s * (2.0 * rng.random::<f64>() - 1.0)],
                k => {
                    let r = s * rng.random::<f64>().sqrt();
                    [r * t.cos(), r * t.sin(), if k == 1 { s } else { -s }]
                }
            }
        }
        Shape::Cone => {
            // base radius s at z = −s, apex at z = s; lateral area πs·s√5
            let part = pick(&[5f64.sqrt(), 1.0], rng);
            let t = TAU * rng.random::<f64>();
            let f = rng.random::<f64>().sqrt();
            match part {
                0 => [s * f * t.cos(), s * f * t.sin(), s - 2.0 * s * f],
                _ => [s * f * t.cos(), s * f * t.sin(), -s],
            }
        }
        Shape::Torus => {
            let (big, small) = (0.7 * s, 0.3 * s);
            loop {
                let (u, v) = (TAU * rng.random::<f64>(), TAU * rng.random::<f64>());
                let w = rng.random::<f64>();
                // area element ∝ R + r cos v
                if w <= (big + small * v.cos()) / (big + small) {
                    let ring = big + small * v.cos();
                    break [ring * u.cos(), ring * u.sin(), small * v.sin()];
                }
            }
        }
        Shape::Pyramid => {
            let apex = [0.0, 0.0, s];
            let b = [[-s, -s, -s], [s, -s, -s], [s, s, -s], [-s, s, -s]];
            let tris = [
                (b[0], b[1], apex),
                (b[1], b[2], apex),
                (b[2], b[3], apex),
                (b[3], b[0], apex),
                (b[0], b[1], b[2]),
                (b[0], b[2], b[3]),
            ];
            let areas: Vec<f64> = tris.iter().map(|&(a, b, c)| tri_area(a, b, c)).collect();
            let (a, b, c) = tris[pick(&areas, rng)];
            lerp3(a, b, c, rng.random(), rng.random())
        }
    }
}

/// Seeded uniform surface sample of the primitive plus Gaussian noise, with
/// the colour in columns 3..6.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let rgb = spec.color.rgb();
    let mut data = Vec::with_capacity(spec.n_points * 6);
    for _ in 0..spec.n_points {
        let p = surface_point(spec.shape, spec.scale, &mut rng);
        for v in p {
            let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(v + e);
        }
        data.extend_from_slice(&rgb);
    }
    PointCloud::new(Tensor::new(vec![spec.n_points, 6], data)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub cloud: String,
    pub instruction: String,
    pub response: String,
    pub task: Task,
}

impl Sample {
    /// Materialize the cloud: inline references are regenerated, anything
    /// else is an SPC1 path resolved against `base`.
    pub fn load_cloud(&self, base: &Path) -> Result<PointCloud> {
        if self.cloud.starts_with(INLINE_PREFIX) {
            gen_shape(&ShapeSpec::from_ref(&self.cloud)?)
        } else {
            spc1::read_file(base.join(&self.cloud))
        }
    }

    pub fn spec(&self) -> Option<ShapeSpec> {
        ShapeSpec::from_ref(&self.cloud).ok()
    }
}

/// Class words found in a text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassWords {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
}

impl ClassWords {
    pub fn is_empty(&self) -> bool {
        self.shape.is_none() && self.color.is_none()
    }
}

/// First shape and colour word in `text` (case-insensitive).
pub fn extract_class_words(s: &str) -> ClassWords {
    let mut out = ClassWords::default();
    for w in text::words(s) {
        if out.shape.is_none() {
            out.shape = w.parse().ok();
        }
        if out.color.is_none() {
            out.color = w.parse().ok();
        }
    }
    out
}

struct Template {
    task: Task,
    instruction: &'static str,
    response: &'static str,
}

const TEMPLATES: &[Template] = &[
    Template {
        task: Task::Caption,
        instruction: "caption this 3d model.",
        response: "a {color} {shape}",
    },
    Template {
        task: Task::Caption,
        instruction: "describe this object.",
        response: "this is a {size} {color} {shape}",
    },
    Template {
        task: Task::Caption,
        instruction: "describe this object in detail.",
        response: "a {size} {shape} with a {color} surface",
    },
    Template {
        task: Task::Classify,
        instruction: "what is this?",
        response: "this is a {color} {shape}",
    },
    Template {
        task: Task::Classify,
        instruction: "this is an object of",
        response: "the {shape} category",
    },
    Template {
        task: Task::Qa,
        instruction: "what color is this object?",
        response: "{color}",
    },
    Template {
        task: Task::Qa,
        instruction: "what shape is this object?",
        response: "{shape}",
    },
];

fn fill(template: &str, shape: Shape, color: Color, size: Size) -> String {
    template
        .replace("{shape}", shape.word())
        .replace("{color}", color.word())
        .replace("{size}", size.word())
}

/// Every instruction and response string the templates can produce.
pub fn all_template_texts() -> Vec<String> {
    let mut out = Vec::new();
    for t in TEMPLATES {
        out.push(t.instruction.to_string());
        for &s in Shape::ALL {
            for &c in Color::ALL {
                for &z in Size::ALL {
                    out.push(fill(t.response, s, c, z));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_points: usize,
    pub noise: f64,
    /// Relative frequency of caption, classify and qa samples.
    pub task_weights: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train: 3000,
            val: 180,
            test: 360,
            n_points: 512,
            noise: 0.01,
            task_weights: [2.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One split: classes cycle through all shape×colour pairs; size, task and
/// template are drawn from the split's seed stream.
pub fn gen_split(cfg: &CorpusConfig, split: &str, count: usize, master_seed: u64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::invalid(format!("split `{split}` has zero samples")));
    }
    if cfg.task_weights.iter().any(|w| !(*w >= 0.0)) || cfg.task_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("task weights must be non-negative with a positive sum"));
    }
    let label = format!("data/{split}");
    let n_classes = Shape::ALL.len() * Color::ALL.len();
    (0..count)
        .map(|i| {
            let s = seed::derive_indexed(master_seed, &label, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let class = i % n_classes;
            let shape = Shape::ALL[class / Color::ALL.len()];
            let color = Color::ALL[class % Color::ALL.len()];
            let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
            let task = Task::ALL[pick(&cfg.task_weights, &mut rng)];
            let options: Vec<&Template> = TEMPLATES.iter().filter(|t| t.task == task).collect();
            let t = options[rng.random_range(0..options.len())];
            let spec = ShapeSpec {
                shape,
                color,
                scale: size.scale(),
                n_points: cfg.n_points,
                noise: cfg.noise,
                seed: s,
            };
            spec.validate()?;
            Ok(Sample {
                cloud: spec.to_ref(),
                instruction: t.instruction.to_string(),
                response: fill(t.response, shape, color, size),
                task,
            })
        })
        .collect()
}

pub fn gen_corpus(cfg: &CorpusConfig, master_seed: u64) -> Result<Corpus> {
    Ok(Corpus {
        train: gen_split(cfg, "train", cfg.train, master_seed)?,
        val: gen_split(cfg, "val", cfg.val, master_seed)?,
        test: gen_split(cfg, "test", cfg.test, master_seed)?,
    })
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if sample.response.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty response".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), samples)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    read_jsonl(BufReader::new(File::open(path)?), path)
}

/// Write each sample's cloud as `clouds/<split>_<i>.spc1` under `dir` and
/// point the sample at that file.
pub fn materialize_clouds(dir: &Path, split: &str, samples: &mut [Sample]) -> Result<()> {
    let clouds = dir.join("clouds");
    std::fs::create_dir_all(&clouds)?;
    for (i, s) in samples.iter_mut().enumerate() {
        let cloud = s.load_cloud(dir)?;
        let rel = PathBuf::from("clouds").join(format!("{split}_{i:05}.spc1"));
        spc1::write_file(&cloud, dir.join(&rel))?;
        s.cloud = rel.to_string_lossy().into_owned();
    }
    Ok(())
}
