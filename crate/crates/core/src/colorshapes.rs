//! ColorShapes: a synthetic image/caption corpus of coloured shapes on a
//! white background, with a class-disjoint train/test split.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
// Unused whenever std ends up linked into the build, since std then supplies
// the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Known colour names and their RGB values.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 170, 40]),
    ("blue", [30, 40, 220]),
    ("yellow", [230, 200, 20]),
    ("orange", [240, 130, 20]),
    ("purple", [130, 40, 170]),
    ("cyan", [20, 190, 200]),
    ("black", [20, 20, 20]),
];

/// Known shape names.
pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "diamond"];

/// Caption templates, rotated by sample index within a class.
pub const TEMPLATES: [&str; 4] = [
    "a {color} {shape} on a white background",
    "this is a {color} {shape}",
    "the {shape} is {color}",
    "a picture of a {color} {shape}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ColorShapesSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Maximum centre offset in pixels along each axis.
    pub jitter_position: f64,
    /// Maximum relative change of the shape size.
    pub jitter_scale: f64,
    /// Fraction of classes held out for the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ColorShapesSpec {
    fn default() -> Self {
        Self {
            colors: ["red", "green", "blue", "yellow"]
                .map(String::from)
                .to_vec(),
            shapes: ["circle", "square", "triangle", "cross"]
                .map(String::from)
                .to_vec(),
            image_size: 32,
            samples_per_class: 8,
            jitter_position: 3.0,
            jitter_scale: 0.15,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl ColorShapesSpec {
    pub fn class_count(&self) -> usize {
        self.colors.len() * self.shapes.len()
    }

    pub fn class_id(&self, color: usize, shape: usize) -> usize {
        color * self.shapes.len() + shape
    }

    /// `(color, shape)` names of a class.
    pub fn class_names(&self, class: usize) -> Option<(&str, &str)> {
        let (c, s) = (class / self.shapes.len(), class % self.shapes.len());
        Some((self.colors.get(c)?.as_str(), self.shapes.get(s)?.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.colors.is_empty() || self.shapes.is_empty() {
            return bad("data.colors and data.shapes must be non-empty".into());
        }
        for c in &self.colors {
            if rgb(c).is_none() {
                return bad(format!("unknown colour '{c}'"));
            }
        }
        for s in &self.shapes {
            if !SHAPES.contains(&s.as_str()) {
                return bad(format!("unknown shape '{s}'"));
            }
        }
        for (kind, names) in [("colour", &self.colors), ("shape", &self.shapes)] {
            for (i, n) in names.iter().enumerate() {
                if names[..i].contains(n) {
                    return bad(format!("duplicate {kind} '{n}'"));
                }
            }
        }
        if self.image_size < 8 {
            return bad(format!(
                "data.image_size must be at least 8, got {}",
                self.image_size
            ));
        }
        if self.samples_per_class == 0 {
            return bad("data.samples_per_class must be positive".into());
        }
        if !(self.jitter_position >= 0.0) || !(0.0..1.0).contains(&self.jitter_scale) {
            return bad("jitter parameters out of range".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("data.test_fraction must lie in (0, 1)".into());
        }
        if self.test_classes().len() >= self.class_count() {
            return bad("test split would leave no training classes".into());
        }
        Ok(())
    }

    /// Held-out classes. Classes are taken diagonal by diagonal of the
    /// colour × shape grid, so each colour and shape appears in the test
    /// split as evenly as possible.
    pub fn test_classes(&self) -> Vec<usize> {
        let (nc, ns) = (self.colors.len(), self.shapes.len());
        let k = nc * ns;
        let n_test = ((k as f64 * self.test_fraction).round() as usize).max(1);
        let mut order: Vec<(usize, usize, usize)> = (0..nc)
            .flat_map(|c| (0..ns).map(move |s| ((s + ns - c % ns) % ns, c, s)))
            .collect();
        order.sort_unstable();
        let mut test: Vec<usize> = order
            .iter()
            .take(n_test)
            .map(|&(_, c, s)| self.class_id(c, s))
            .collect();
        test.sort_unstable();
        test
    }

    pub fn train_classes(&self) -> Vec<usize> {
        let test = self.test_classes();
        (0..self.class_count())
            .filter(|c| !test.contains(c))
            .collect()
    }
}

pub fn rgb(color: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == color).map(|&(_, v)| v)
}

/// Caption for the `index`-th sample of a class.
pub fn caption(color: &str, shape: &str, index: usize) -> String {
    TEMPLATES[index % TEMPLATES.len()]
        .replace("{color}", color)
        .replace("{shape}", shape)
}

/// Recovers `(color, shape)` from a caption produced by [`caption`].
pub fn parse_caption<'a>(spec: &'a ColorShapesSpec, text: &str) -> Option<(&'a str, &'a str)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let color = spec.colors.iter().find(|c| words.contains(&c.as_str()))?;
    let shape = spec.shapes.iter().find(|s| words.contains(&s.as_str()))?;
    Some((color.as_str(), shape.as_str()))
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3×H×W]` tensor with `b ↦ 2b/255 − 1`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |k| {
            let (ch, p) = (k / (w * h), k % (w * h));
            2.0 * f64::from(self.data[p * 3 + ch]) / 255.0 - 1.0
        })
        .expect("image dimensions are positive")
    }

    /// Inverse of [`RgbImage::to_tensor`]: `v ↦ round((v + 1)·255/2)`,
    /// rounding half away from zero and clamping to `[0, 255]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [3, h, w] = *t.shape() else {
            return Err(Error::InvalidShape {
                op: "image",
                detail: format!("expected 3×H×W, got {:?}", t.shape()),
            });
        };
        let mut data = vec![0u8; w * h * 3];
        for (k, &v) in t.values().iter().enumerate() {
            let (ch, p) = (k / (w * h), k % (w * h));
            data[p * 3 + ch] = quantize(v);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Maps a value in `[-1, 1]` to a byte.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v + 1.0) * 255.0 / 2.0).round().clamp(0.0, 255.0) as u8
}

/// Colour channel with the largest total intensity over non-white pixels
/// (pixels whose darkest channel is below 200). `None` for a blank image.
pub fn dominant_channel(image: &RgbImage) -> Option<usize> {
    let mut sums = [0u64; 3];
    let mut any = false;
    for px in image.data.chunks_exact(3) {
        if px.iter().copied().min().unwrap_or(255) < 200 {
            any = true;
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += u64::from(v);
            }
        }
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for ch in 1..3 {
        if sums[ch] > sums[best] {
            best = ch;
        }
    }
    Some(best)
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // Apex at the top, base at the bottom.
        "triangle" => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.65 * (dy + r),
        "cross" => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        "diamond" => dx.abs() + dy.abs() <= r,
        _ => false,
    }
}

/// Renders one shape of radius `r` centred at `(cx, cy)` in pixel units,
/// sampling pixel centres.
pub fn render(size: usize, color: [u8; 3], shape: &str, cx: f64, cy: f64, r: f64) -> RgbImage {
    let mut img = RgbImage::filled(size, size, [255, 255, 255]);
    for y in 0..size {
        for x in 0..size {
            if inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                let i = (y * size + x) * 3;
                img.data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class_id: usize,
    /// Index of the sample within its class.
    pub index: usize,
    pub image: RgbImage,
    pub caption: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorShapes {
    pub spec: ColorShapesSpec,
    pub samples: Vec<Sample>,
}

impl ColorShapes {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Renders the corpus; a pure function of `spec`.
pub fn generate(spec: &ColorShapesSpec) -> Result<ColorShapes> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let test = spec.test_classes();
    let size = spec.image_size as f64;
    let mut samples = Vec::with_capacity(spec.class_count() * spec.samples_per_class);
    for (ci, color) in spec.colors.iter().enumerate() {
        let value = rgb(color).expect("validated colour");
        for (si, shape) in spec.shapes.iter().enumerate() {
            let class_id = spec.class_id(ci, si);
            for index in 0..spec.samples_per_class {
                let jp = spec.jitter_position;
                let dx = if jp > 0.0 {
                    rng.random_range(-jp..=jp)
                } else {
                    0.0
                };
                let dy = if jp > 0.0 {
                    rng.random_range(-jp..=jp)
                } else {
                    0.0
                };
                let js = spec.jitter_scale;
                let scale = if js > 0.0 {
                    rng.random_range(-js..=js)
                } else {
                    0.0
                };
                let r = 0.3 * size * (1.0 + scale);
                samples.push(Sample {
                    class_id,
                    index,
                    image: render(
                        spec.image_size,
                        value,
                        shape,
                        size / 2.0 + dx,
                        size / 2.0 + dy,
                        r,
                    ),
                    caption: caption(color, shape, index),
                    split: if test.contains(&class_id) {
                        Split::Test
                    } else {
                        Split::Train
                    },
                });
            }
        }
    }
    Ok(ColorShapes {
        spec: spec.clone(),
        samples,
    })
}

/// Short identifier for a class, e.g. `red_circle`.
pub fn class_label(spec: &ColorShapesSpec, class: usize) -> String {
    match spec.class_names(class) {
        Some((c, s)) => format!("{c}_{s}"),
        None => class.to_string(),
    }
}
