//! Semantic parsing masks: a label raster over a declared category set, each
//! category carrying a domain and a binarization threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DomainMask, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    In,
    Out,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::In => "in",
            Domain::Out => "out",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "in" => Ok(Domain::In),
            "out" => Ok(Domain::Out),
            other => Err(Error::Argument(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub name: String,
    pub domain: Domain,
    pub tau: f64,
}

/// Categories indexed by label value.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySet {
    categories: Vec<Category>,
}

/// Face categories that get the stricter threshold.
const DETAIL: [&str; 3] = ["eyes", "nose", "mouth"];

impl CategorySet {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() || categories.len() > 256 {
            return Err(Error::Argument("a category set needs 1..=256 entries".into()));
        }
        if let Some(c) = categories.iter().find(|c| !c.tau.is_finite()) {
            return Err(Error::Argument(format!(
                "category `{}` has a non-finite threshold",
                c.name
            )));
        }
        Ok(Self { categories })
    }

    /// The face layout used by the bundled synthetic parser:
    ///
    /// | label | name | domain |
    /// |---|---|---|
    /// | 0 | background | out |
    /// | 1 | skin | in |
    /// | 2 | hair | in |
    /// | 3 | eyes | in |
    /// | 4 | nose | in |
    /// | 5 | mouth | in |
    /// | 6 | brows | in |
    /// | 7 | ears | in |
    /// | 8 | clothing | out |
    /// | 9 | headwear | out |
    /// | 10 | occlusion | out |
    ///
    /// Eyes, nose and mouth use `tau2`; everything else uses `tau1`.
    pub fn faces(tau1: f64, tau2: f64) -> Self {
        let spec = [
            ("background", Domain::Out),
            ("skin", Domain::In),
            ("hair", Domain::In),
            ("eyes", Domain::In),
            ("nose", Domain::In),
            ("mouth", Domain::In),
            ("brows", Domain::In),
            ("ears", Domain::In),
            ("clothing", Domain::Out),
            ("headwear", Domain::Out),
            ("occlusion", Domain::Out),
        ];
        Self {
            categories: spec
                .iter()
                .map(|&(name, domain)| Category {
                    name: name.into(),
                    domain,
                    tau: if DETAIL.contains(&name) { tau2 } else { tau1 },
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, label: u8) -> Option<&Category> {
        self.categories.get(label as usize)
    }

    pub fn label_of(&self, name: &str) -> Option<u8> {
        self.categories.iter().position(|c| c.name == name).map(|i| i as u8)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter()
    }

    /// Sidecar text: one `label<TAB>name<TAB>domain<TAB>tau` row per category.
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("# label\tname\tdomain\ttau\n");
        for (i, c) in self.categories.iter().enumerate() {
            writeln!(out, "{i}\t{}\t{}\t{}", c.name, c.domain.tag(), c.tau).expect("string write");
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, Category)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse { line: n + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let [label, name, domain, tau] = fields[..] else {
                return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
            };
            let label: usize = label.parse().map_err(|e| bad(format!("label: {e}")))?;
            let tau: f64 = tau.parse().map_err(|e| bad(format!("tau: {e}")))?;
            let domain = Domain::from_tag(domain).map_err(|e| bad(e.to_string()))?;
            rows.push((
                label,
                Category {
                    name: name.to_string(),
                    domain,
                    tau,
                },
            ));
        }
        rows.sort_by_key(|(l, _)| *l);
        if rows.iter().enumerate().any(|(i, (l, _))| i != *l) {
            return Err(Error::Parse {
                line: 0,
                message: "labels must be exactly 0..n with no gaps or repeats".into(),
            });
        }
        Self::new(rows.into_iter().map(|(_, c)| c).collect())
    }
}

impl Default for CategorySet {
    fn default() -> Self {
        Self::faces(0.7, 0.8)
    }
}

/// A per-pixel category map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsingMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    categories: CategorySet,
}

impl ParsingMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, categories: CategorySet) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "parsing raster has {} labels for {height}x{width}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= categories.len()) {
            return Err(Error::Argument(format!("label {l} has no category")));
        }
        Ok(Self {
            height,
            width,
            labels,
            categories,
        })
    }

    /// Every pixel in one category.
    pub fn uniform(height: usize, width: usize, label: u8, categories: CategorySet) -> Result<Self> {
        Self::new(height, width, vec![label; height * width], categories)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn categories(&self) -> &CategorySet {
        &self.categories
    }

    pub fn category_at(&self, y: usize, x: usize) -> &Category {
        self.categories
            .get(self.labels[y * self.width + x])
            .expect("labels validated at construction")
    }

    /// `m_p`: 1 where the pixel's category is in-domain.
    pub fn domain_mask(&self) -> DomainMask {
        DomainMask::from_fn(self.height, self.width, |y, x| {
            self.category_at(y, x).domain == Domain::In
        })
    }

    /// Writes `<stem>.png` (labels) and `<stem>.txt` (category manifest).
    pub fn save(&self, png: impl AsRef<Path>) -> Result<()> {
        let png = png.as_ref();
        crate::io::save_labels(&self.labels, self.height, self.width, png)?;
        let sidecar = png.with_extension("txt");
        fs::write(&sidecar, self.categories.to_manifest()).map_err(|e| Error::io(sidecar, e))
    }

    /// Reads a raster and its sidecar; without a sidecar the default face
    /// categories apply.
    pub fn load(png: impl AsRef<Path>) -> Result<Self> {
        let png = png.as_ref();
        let (h, w, labels) = crate::io::load_labels(png)?;
        let sidecar = png.with_extension("txt");
        let categories = if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            CategorySet::from_manifest(&text)?
        } else {
            CategorySet::default()
        };
        Self::new(h, w, labels, categories)
    }
}

/// An image-to-parsing model.
pub trait ParsingOracle: Send + Sync {
    fn parse(&self, image: &Image<f32>) -> Result<ParsingMask>;
}

/// Labels every pixel with one category.
#[derive(Clone, Debug)]
pub struct UniformParser {
    pub label: u8,
    pub categories: CategorySet,
}

impl UniformParser {
    /// Every pixel is face skin (in-domain).
    pub fn skin(categories: CategorySet) -> Self {
        let label = categories.label_of("skin").unwrap_or(0);
        Self { label, categories }
    }
}

impl ParsingOracle for UniformParser {
    fn parse(&self, image: &Image<f32>) -> Result<ParsingMask> {
        ParsingMask::uniform(image.height(), image.width(), self.label, self.categories.clone())
    }
}

/// Returns a stored ground-truth raster for the image it ships with.
#[derive(Clone, Debug)]
pub struct RasterParser {
    pub mask: ParsingMask,
}

impl ParsingOracle for RasterParser {
    fn parse(&self, image: &Image<f32>) -> Result<ParsingMask> {
        if image.height() != self.mask.height() || image.width() != self.mask.width() {
            return Err(Error::Argument(format!(
                "parsing raster is {}x{}, image is {}x{}",
                self.mask.height(),
                self.mask.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(self.mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_defaults() {
        let set = CategorySet::default();
        for c in set.iter() {
            let expect_tau = if DETAIL.contains(&c.name.as_str()) { 0.8 } else { 0.7 };
            assert_eq!(c.tau, expect_tau, "{}", c.name);
        }
        let domain = |n: &str| set.get(set.label_of(n).unwrap()).unwrap().domain;
        assert_eq!(domain("hair"), Domain::In);
        assert_eq!(domain("background"), Domain::Out);
        assert_eq!(domain("occlusion"), Domain::Out);
    }

    #[test]
    fn manifest_round_trip() {
        let set = CategorySet::faces(0.65, 0.9);
        assert_eq!(CategorySet::from_manifest(&set.to_manifest()).unwrap(), set);
        assert!(CategorySet::from_manifest("0\tskin\tin\n").is_err());
        assert!(CategorySet::from_manifest("1\tskin\tin\t0.7\n").is_err());
    }

    #[test]
    fn raster_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("parse.png");
        let m = ParsingMask::new(2, 3, vec![0, 1, 2, 3, 10, 1], CategorySet::faces(0.6, 0.9)).unwrap();
        m.save(&path).unwrap();
        assert_eq!(ParsingMask::load(&path).unwrap(), m);
    }

    #[test]
    fn unknown_labels_are_rejected() {
        assert!(ParsingMask::new(1, 1, vec![11], CategorySet::default()).is_err());
    }
}
