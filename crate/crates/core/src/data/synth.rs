//! Desk-scale stand-in corpus: colored geometric shapes on plain
//! backgrounds, phrased into all six instruction categories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::guardrail::make_guardrails;
use super::record::{write_jsonl, Category, InstructionRecord, Turn};
use crate::error::Result;
use crate::eval::{mcq_text, BenchmarkItem, ItemKind};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const BENCH_FILE: &str = "bench.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const SYNTH_IMAGE_SIZE: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Circles are drawn a little smaller so that, at a given `r`, the three
    /// shapes cover clearly different areas.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= 0.72 * r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 210, 40]),
    ("purple", [150, 60, 200]),
    ("orange", [245, 140, 30]),
    ("cyan", [40, 205, 215]),
    ("white", [240, 240, 240]),
];

/// Every `"color shape"` label, in a fixed order.
pub fn all_labels() -> Vec<String> {
    let mut out = Vec::with_capacity(24);
    for (c, _) in COLORS {
        for s in Shape::ALL {
            out.push(format!("{c} {}", s.name()));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Drawn {
    pub shape: Shape,
    pub color: &'static str,
    pub size_word: &'static str,
    pub background: &'static str,
    pub image: RgbImage,
}

impl Drawn {
    pub fn label(&self) -> String {
        format!("{} {}", self.color, self.shape.name())
    }
}

/// Draws one shape of a random color, size and small offset.
pub fn draw_shape(rng: &mut impl Rng) -> Drawn {
    let shape = *Shape::ALL.choose(rng).expect("nonempty");
    let (color, rgb) = *COLORS.choose(rng).expect("nonempty");
    let (background, base) = *[("black", 0u8), ("dark grey", 45)].choose(rng).expect("nonempty");
    let tint: i16 = rng.gen_range(-8..=8);
    let bg = (base as i16 + tint).clamp(0, 255) as u8;
    let n = SYNTH_IMAGE_SIZE as f64;
    let r = rng.gen_range(0.34..0.40) * n;
    let cx = n / 2.0 + rng.gen_range(-3.0..3.0);
    let cy = n / 2.0 + rng.gen_range(-3.0..3.0);
    let size_word = if r < 0.36 * n {
        "small"
    } else if r < 0.38 * n {
        "medium"
    } else {
        "large"
    };
    let image = RgbImage::from_fn(SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        if shape.contains(dx, dy, r) {
            Rgb(rgb)
        } else {
            Rgb([bg, bg, bg])
        }
    });
    Drawn {
        shape,
        color,
        size_word,
        background,
        image,
    }
}

/// Non-shape picture for out-of-domain guardrails: smooth color gradients
/// under pixel noise.
pub fn draw_photo(rng: &mut impl Rng) -> RgbImage {
    let a: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let b: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let noise: Vec<i16> = (0..SYNTH_IMAGE_SIZE * SYNTH_IMAGE_SIZE * 3)
        .map(|_| rng.gen_range(-40..=40))
        .collect();
    RgbImage::from_fn(SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE, |x, y| {
        let t = (x + y) as f64 / (2.0 * SYNTH_IMAGE_SIZE as f64);
        let i = ((y * SYNTH_IMAGE_SIZE + x) * 3) as usize;
        let px = |c: usize| {
            let v = 255.0 * (a[c] * (1.0 - t) + b[c] * t) + noise[i + c] as f64;
            v.clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub conversation: usize,
    pub description: usize,
    pub multiple_choice: usize,
    pub free_response: usize,
    pub text_only: usize,
    pub guardrail: usize,
}

impl CorpusSizes {
    pub fn total(&self) -> usize {
        self.conversation
            + self.description
            + self.multiple_choice
            + self.free_response
            + self.text_only
            + self.guardrail
    }

    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::Conversation => self.conversation,
            Category::Description => self.description,
            Category::MultipleChoice => self.multiple_choice,
            Category::FreeResponse => self.free_response,
            Category::TextOnly => self.text_only,
            Category::Guardrail => self.guardrail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<InstructionRecord>,
    /// Image file name → pixels, for every referenced image.
    pub images: BTreeMap<String, RgbImage>,
}

impl SyntheticCorpus {
    /// Writes `records.jsonl` and `images/*.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_images(dir, &self.images)?;
        write_jsonl(&dir.join(RECORDS_FILE), &self.records)
    }
}

pub fn write_images(dir: &Path, images: &BTreeMap<String, RgbImage>) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir)?;
    for (name, img) in images {
        img.save_with_format(img_dir.join(name), image::ImageFormat::Png)?;
    }
    Ok(())
}

pub const MCQ_QUESTION: &str = "Which option best describes the object in the image?";

const DESCRIBE: [&str; 3] = [
    "Describe the image in detail.",
    "Provide a detailed description of this image.",
    "What can be seen in this image?",
];

const NO_IMAGE_PROMPTS: [&str; 4] = [
    "Describe this image of a shape.",
    "What color is the object in this picture?",
    "Which shape is shown in the attached image?",
    "Can you describe the figure in this image?",
];

const SHAPE_FACTS: [(&str, &str); 6] = [
    ("How many sides does a triangle have?", "A triangle has three straight sides."),
    ("How many sides does a square have?", "A square has four equal straight sides."),
    ("Does a circle have any corners?", "No, a circle has no corners or straight edges."),
    ("Which shape has four right angles?", "A square has four right angles."),
    ("What is the boundary of a circle called?", "The boundary of a circle is its circumference."),
    ("How many corners does a triangle have?", "A triangle has three corners."),
];

fn describe(d: &Drawn) -> String {
    format!(
        "The image shows a {} {} {} near the center of a plain {} background, with no other objects in view.",
        d.size_word,
        d.color,
        d.shape.name(),
        d.background
    )
}

/// Generates a corpus with exactly `sizes` records per category.
pub fn generate_synthetic_corpus(seed: u64, sizes: &CorpusSizes) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = BTreeMap::new();
    let mut records = Vec::with_capacity(sizes.total());
    let labels = all_labels();
    let new_image = |rng: &mut ChaCha8Rng, images: &mut BTreeMap<String, RgbImage>| {
        let d = draw_shape(rng);
        let name = format!("img_{:05}.png", images.len());
        images.insert(name.clone(), d.image.clone());
        (name, d)
    };
    let push = |records: &mut Vec<InstructionRecord>, category, images: Vec<String>, turns| {
        let id = format!("{}-{:05}", category, records.len());
        records.push(InstructionRecord {
            id,
            category,
            images,
            turns,
            source: "synthetic".into(),
        });
    };

    for _ in 0..sizes.description {
        let (name, d) = new_image(&mut rng, &mut images);
        let q = *DESCRIBE.choose(&mut rng).expect("nonempty");
        push(&mut records, Category::Description, vec![name], vec![Turn::new(q, describe(&d))]);
    }
    for _ in 0..sizes.conversation {
        let (name, d) = new_image(&mut rng, &mut images);
        let mut turns = vec![
            Turn::new("What color is the object in this image?", format!("The object is {}.", d.color)),
            Turn::new("What shape does it have?", format!("It is a {}.", d.shape.name())),
        ];
        if rng.gen_bool(0.5) {
            turns.swap(0, 1);
            turns[0].instruction = "What shape is the object in this image?".into();
            turns[1].instruction = "What color is it?".into();
        }
        push(&mut records, Category::Conversation, vec![name], turns);
    }
    for _ in 0..sizes.multiple_choice {
        let (name, d) = new_image(&mut rng, &mut images);
        let key = d.label();
        let options = mcq_options(&key, &labels, &mut rng);
        let refs: Vec<&str> = options.iter().map(String::as_str).collect();
        let turn = Turn::new(mcq_text(None, MCQ_QUESTION, &refs), format!("- {key}"));
        push(&mut records, Category::MultipleChoice, vec![name], vec![turn]);
    }
    for _ in 0..sizes.free_response {
        let (name, d) = new_image(&mut rng, &mut images);
        let turn = if rng.gen_bool(0.5) {
            Turn::new("Name the color and shape of the object.", d.label())
        } else {
            Turn::new("Briefly, what is shown here?", format!("A {} {}.", d.color, d.shape.name()))
        };
        push(&mut records, Category::FreeResponse, vec![name], vec![turn]);
    }
    for _ in 0..sizes.text_only {
        let (q, a) = *SHAPE_FACTS.choose(&mut rng).expect("nonempty");
        push(&mut records, Category::TextOnly, Vec::new(), vec![Turn::new(q, a)]);
    }
    if sizes.guardrail > 0 {
        let pool: Vec<String> = (0..sizes.guardrail.div_ceil(4).max(1))
            .map(|i| {
                let name = format!("photo_{i:05}.png");
                images.insert(name.clone(), draw_photo(&mut rng));
                name
            })
            .collect();
        let prompts: Vec<String> = NO_IMAGE_PROMPTS.iter().map(|s| s.to_string()).collect();
        let per_kind = sizes.guardrail.div_ceil(2);
        let guards = make_guardrails(&prompts, &pool, per_kind, rng.gen())
            .expect("prompts and pool are nonempty");
        let (no_image, domain) = guards.split_at(per_kind);
        let picked = no_image.iter().chain(&domain[..sizes.guardrail - per_kind]);
        for g in picked {
            push(&mut records, Category::Guardrail, g.images.clone(), g.turns.clone());
        }
    }
    SyntheticCorpus { records, images }
}

/// Ten options: the key plus nine distinct distractors, shuffled.
fn mcq_options(key: &str, labels: &[String], rng: &mut impl Rng) -> Vec<String> {
    let others: Vec<&String> = labels.iter().filter(|l| *l != key).collect();
    let mut options: Vec<String> = others.choose_multiple(rng, 9).map(|s| s.to_string()).collect();
    options.push(key.to_string());
    options.shuffle(rng);
    options
}

/// Held-out multiple-choice benchmark over fresh shape images; the organ
/// field carries the shape so results can be stratified by it.
pub fn generate_synthetic_bench(seed: u64, n: usize) -> (Vec<BenchmarkItem>, BTreeMap<String, RgbImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = all_labels();
    let mut items = Vec::with_capacity(n);
    let mut images = BTreeMap::new();
    for i in 0..n {
        let d = draw_shape(&mut rng);
        let name = format!("bench_{i:05}.png");
        images.insert(name.clone(), d.image.clone());
        let key = d.label();
        let options = mcq_options(&key, &labels, &mut rng);
        let key_index = options.iter().position(|o| *o == key).expect("key is an option");
        items.push(BenchmarkItem {
            id: format!("bench-{i:05}"),
            image: name,
            organ: d.shape.name().into(),
            clinical_context: Some(format!("The object sits on a {} background.", d.background)),
            question: MCQ_QUESTION.into(),
            kind: ItemKind::Mcq,
            options,
            key: Some(key_index),
            categories: Vec::new(),
            sub_categories: Vec::new(),
            reference: Some(key),
        });
    }
    (items, images)
}
