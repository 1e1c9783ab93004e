//! End-to-end inversion: embed, segment, refine, render, and the on-disk bundle.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::archive::{
    delta_archive, feature_archive, feature_from_archive, generator_archive, generator_from_archive, image_archive,
    image_from_archive, latent_archive, latent_from_archive, state_from_delta, Archive,
};
use crate::config::{EncoderSpec, GeneratorSource, ParsingSource, RunConfig};
use crate::editing::RefinedArtifacts;
use crate::embedding::{coarse_invert, validate_encoded, EmbeddingResult, EncoderOracle, ExecEncoder};
use crate::error::{Error, Result};
use crate::generator::{GeneratorState, ToyGenerator};
use crate::io::{load_image, load_mask, save_image16, save_mask};
use crate::latent::LatentCode;
use crate::metrics::EvalRecord;
use crate::refine::{refine, Refined, RefinementSession, StepRecord};
use crate::segmentation::{segment_with_coarse, ParsingMask, ParsingOracle, RasterParser, Segmentation, UniformParser};
use crate::tensor::{DomainMask, Image};

/// Environment variable naming the stage cache root.
pub const CACHE_ENV: &str = "DHR_CACHE_DIR";

/// File names inside a bundle directory.
pub mod files {
    pub const INPUT: &str = "input.png";
    pub const LATENT: &str = "latent.bin";
    pub const COARSE: &str = "coarse.png";
    pub const MASK: &str = "mask.png";
    pub const SUPERPIXEL_MASK: &str = "superpixel_mask.png";
    pub const PARSING: &str = "parsing.png";
    pub const PARSING_MANIFEST: &str = "parsing.txt";
    pub const MASK_FEAT: &str = "mask_feat.png";
    pub const REFINED: &str = "refined.png";
    pub const THETA_DELTA: &str = "theta_delta.bin";
    pub const FEATURE: &str = "feature.bin";
    pub const GENERATOR: &str = "generator.bin";
    pub const HISTORY: &str = "history.tsv";
    pub const EVAL: &str = "eval.jsonl";
    pub const CONFIG: &str = "config.txt";
    pub const FINGERPRINT: &str = "fingerprint";
    pub const FAILED: &str = "FAILED";
}

/// Builds the generator state described by `config`, with a zero deviation.
pub fn build_state(config: &RunConfig) -> Result<GeneratorState<f32>> {
    let generator = match &config.generator {
        GeneratorSource::Toy => ToyGenerator::new(config.toy.clone())?,
        GeneratorSource::Checkpoint(path) => generator_from_archive(&Archive::load(path)?)?,
    };
    let layer = config.inject_layer.unwrap_or(generator.n_layers() / 2);
    Ok(GeneratorState::new(Arc::new(generator), layer)?.with_scope(config.tune_scope))
}

/// Content-addressed store for the coarse and encoder stages.
#[derive(Clone, Debug)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$DHR_CACHE_DIR`, or `dhr-cache` under the system temp directory.
    pub fn from_env() -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(dir),
            _ => Self::new(std::env::temp_dir().join("dhr-cache")),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(format!("{key}.bin"))
    }

    fn get(&self, stage: &str, key: &str) -> Option<Archive> {
        Archive::load(self.path(stage, key)).ok()
    }

    /// Best effort: a cache that cannot be written only costs time.
    fn put(&self, stage: &str, key: &str, archive: &Archive) {
        let path = self.path(stage, key);
        let Some(dir) = path.parent() else { return };
        if fs::create_dir_all(dir).is_err() {
            return;
        }
        let tmp = dir.join(format!("{key}.{}.tmp", std::process::id()));
        if fs::write(&tmp, archive.to_bytes()).is_ok() && fs::rename(&tmp, &path).is_err() {
            let _ = fs::remove_file(&tmp);
        }
    }
}

fn cache_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn image_bytes(image: &Image<f32>) -> Vec<u8> {
    image.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn coarse_to_archive(r: &EmbeddingResult) -> Archive {
    let bits: Vec<u64> = r.loss_trace.iter().map(|v| v.to_bits()).collect();
    let mut a = latent_archive(&r.latent, "").with_meta("loss_trace_bits", bits);
    let img = image_archive(&r.coarse_image);
    let (shape, data) = img.array("image").expect("image array");
    a.push("coarse_image", shape.to_vec(), data.to_vec())
        .expect("consistent shape");
    a
}

fn coarse_from_archive(a: &Archive) -> Result<EmbeddingResult> {
    let latent = latent_from_archive(a)?;
    let (shape, data) = a.array("coarse_image")?;
    let mut img = Archive::new("image");
    img.push("image", shape.to_vec(), data.to_vec())?;
    let bits: Vec<u64> = serde_json::from_value(a.meta.get("loss_trace_bits").cloned().unwrap_or_default())
        .map_err(|e| Error::Archive(format!("bad loss trace: {e}")))?;
    Ok(EmbeddingResult {
        latent,
        coarse_image: image_from_archive(&img)?,
        loss_trace: bits.into_iter().map(f64::from_bits).collect(),
    })
}

/// A configured pipeline: generator, plug-ins and cache.
pub struct Pipeline {
    pub config: RunConfig,
    pub state: GeneratorState<f32>,
    pub encoder: Option<Box<dyn EncoderOracle>>,
    pub parser: Box<dyn ParsingOracle>,
    pub cache: Option<StageCache>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let state = build_state(&config)?;
        let encoder: Option<Box<dyn EncoderOracle>> = match &config.encoder {
            EncoderSpec::None => None,
            EncoderSpec::Exec(p) => Some(Box::new(ExecEncoder::new(p, state.generator().fingerprint()))),
        };
        let parser: Box<dyn ParsingOracle> = match &config.parsing {
            ParsingSource::Skin => Box::new(UniformParser::skin(config.categories())),
            ParsingSource::Raster(p) => Box::new(RasterParser {
                mask: ParsingMask::load(p)?,
            }),
        };
        Ok(Self {
            config,
            state,
            encoder,
            parser,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: Option<StageCache>) -> Self {
        self.cache = cache;
        self
    }

    fn stage_key(&self, stage: &str, keys: &[&str], image: &Image<f32>) -> Result<String> {
        let fp = self.state.generator().fingerprint();
        let subset = self.config.subset_fingerprint(keys)?;
        Ok(cache_key(&[
            stage.as_bytes(),
            fp.as_bytes(),
            subset.as_bytes(),
            &image_bytes(image),
        ]))
    }

    /// The coarse W inversion; one run serves both embedding and segmentation.
    pub fn coarse(&self, image: &Image<f32>) -> Result<EmbeddingResult> {
        const KEYS: &[&str] = &[
            "seed",
            "coarse.steps",
            "coarse.lr",
            "coarse.mean_samples",
            "coarse.rampup",
            "coarse.rampdown",
            "oracle.coarse",
        ];
        let key = self.stage_key("coarse", KEYS, image)?;
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get("coarse", &key)) {
            if let Ok(r) = coarse_from_archive(&hit) {
                return Ok(r);
            }
        }
        let oracle = self.config.oracle_coarse.build::<f32>();
        let r = coarse_invert(&self.state, image, &self.config.coarse, oracle.as_ref())?;
        if let Some(c) = &self.cache {
            c.put("coarse", &key, &coarse_to_archive(&r));
        }
        Ok(r)
    }

    /// The W+ code refinement starts from: the encoder's output, or the coarse latent.
    pub fn embed(&self, image: &Image<f32>, coarse: &EmbeddingResult) -> Result<LatentCode<f32>> {
        let Some(encoder) = &self.encoder else {
            return coarse.latent.lift_to_wplus(self.state.n_layers());
        };
        let key = self.stage_key("encode", &["encoder"], image)?;
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get("encode", &key)) {
            if let Ok(code) = latent_from_archive(&hit) {
                return Ok(code);
            }
        }
        let code = validate_encoded(&self.state, encoder.encode(image)?)?;
        if let Some(c) = &self.cache {
            c.put("encode", &key, &latent_archive(&code, ""));
        }
        Ok(code)
    }

    pub fn segment(&self, image: &Image<f32>, coarse: EmbeddingResult) -> Result<Segmentation> {
        let map_oracle = self.config.oracle_map.build::<f32>();
        segment_with_coarse(
            image,
            coarse,
            &self.config.slic,
            map_oracle.as_ref(),
            self.parser.as_ref(),
        )
    }

    pub fn refine(&self, image: &Image<f32>, latent: &LatentCode<f32>, mask: &DomainMask) -> Result<Refined<f32>> {
        let session = RefinementSession::new(
            self.state.clone(),
            latent.clone(),
            image.clone(),
            mask.clone(),
            self.config.refine,
            self.config.oracle_refine.build::<f32>(),
        )?;
        refine(session)
    }

    /// Runs every stage in memory. Errors carry the failing stage's name.
    pub fn invert(&self, image: &Image<f32>) -> Result<Inversion> {
        let start = Instant::now();
        let coarse = self.coarse(image).map_err(|e| e.stage("embed"))?;
        let latent = self.embed(image, &coarse).map_err(|e| e.stage("embed"))?;
        let segmentation = self.segment(image, coarse).map_err(|e| e.stage("segment"))?;
        let refined = self
            .refine(image, &latent, &segmentation.mask)
            .map_err(|e| e.stage("refine"))?;
        let output = refined
            .state
            .synthesize_with_injection(&latent, &refined.feature, &refined.mask_feat)
            .map_err(|e| e.stage("synthesize"))?;
        Ok(Inversion {
            latent,
            segmentation,
            refined,
            output,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    pub fn evaluate(
        &self,
        id: &str,
        prediction: &Image<f32>,
        target: &Image<f32>,
        wall_time: f64,
    ) -> Result<EvalRecord> {
        let oracle = self.config.oracle_eval.build::<f32>();
        EvalRecord::evaluate(
            id,
            prediction,
            target,
            oracle.as_ref(),
            wall_time,
            self.config.fingerprint(),
        )
    }
}

/// Everything [`Pipeline::invert`] produces.
pub struct Inversion {
    /// The W+ pivot.
    pub latent: LatentCode<f32>,
    pub segmentation: Segmentation,
    pub refined: Refined<f32>,
    pub output: Image<f32>,
    pub wall_time: f64,
}

impl Inversion {
    pub fn artifacts(&self) -> RefinedArtifacts {
        RefinedArtifacts {
            state: self.refined.state.clone(),
            latent: self.latent.clone(),
            feature: self.refined.feature.clone(),
            mask_feat: self.refined.mask_feat.clone(),
        }
    }
}

/// One row per step: `step`, `L_in`, `L_out`; `-` marks a skipped branch.
pub fn history_table(history: &[StepRecord]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:e}"));
    let mut s = String::from("step\tL_in\tL_out\n");
    for r in history {
        s.push_str(&format!("{}\t{}\t{}\n", r.step, cell(r.l_in), cell(r.l_out)));
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<StepRecord>> {
    let cell = |v: &str| -> Result<Option<f64>> {
        if v == "-" {
            Ok(None)
        } else {
            v.parse()
                .map(Some)
                .map_err(|e| Error::Argument(format!("bad history value `{v}`: {e}")))
        }
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Argument(format!("history row `{line}` needs 3 columns")));
            }
            Ok(StepRecord {
                step: cols[0]
                    .parse()
                    .map_err(|e| Error::Argument(format!("bad step `{}`: {e}", cols[0])))?,
                l_in: cell(cols[1])?,
                l_out: cell(cols[2])?,
            })
        })
        .collect()
}

/// A bundle directory on disk.
#[derive(Clone, Debug)]
pub struct RunBundle {
    pub dir: PathBuf,
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

impl RunBundle {
    /// Creates the directory if needed.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::Argument(format!("{} is not a bundle directory", dir.display())));
        }
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn is_failed(&self) -> bool {
        self.path(files::FAILED).exists()
    }

    /// Config, its fingerprint and the generator checkpoint.
    pub fn write_setup(&self, pipeline: &Pipeline) -> Result<()> {
        let _ = fs::remove_file(self.path(files::FAILED));
        pipeline.config.save(self.path(files::CONFIG))?;
        write_text(
            self.path(files::FINGERPRINT),
            &format!("{}\n", pipeline.config.fingerprint()),
        )?;
        generator_archive(pipeline.state.generator()).save(self.path(files::GENERATOR))
    }

    /// Copies the input file byte for byte.
    pub fn write_input(&self, source: &Path) -> Result<()> {
        let dest = self.path(files::INPUT);
        if source != dest {
            fs::copy(source, &dest).map_err(|e| Error::io(source, e))?;
        }
        Ok(())
    }

    pub fn write_embedding(&self, latent: &LatentCode<f32>, coarse: &Image<f32>, generator_fp: &str) -> Result<()> {
        latent_archive(latent, generator_fp).save(self.path(files::LATENT))?;
        save_image16(coarse, self.path(files::COARSE))
    }

    pub fn write_segmentation(&self, seg: &Segmentation) -> Result<()> {
        save_mask(&seg.mask, self.path(files::MASK))?;
        save_mask(&seg.superpixel_mask, self.path(files::SUPERPIXEL_MASK))?;
        seg.parsing.save(self.path(files::PARSING))
    }

    pub fn write_refinement(&self, refined: &Refined<f32>, output: &Image<f32>) -> Result<()> {
        save_mask(&refined.mask_feat, self.path(files::MASK_FEAT))?;
        delta_archive(&refined.state).save(self.path(files::THETA_DELTA))?;
        feature_archive(&refined.feature).save(self.path(files::FEATURE))?;
        write_text(self.path(files::HISTORY), &history_table(&refined.history))?;
        save_image16(output, self.path(files::REFINED))
    }

    pub fn write_eval(&self, records: &[EvalRecord]) -> Result<()> {
        let text: String = records.iter().map(|r| r.to_line() + "\n").collect();
        write_text(self.path(files::EVAL), &text)
    }

    pub fn mark_failed(&self, error: &Error) -> Result<()> {
        write_text(self.path(files::FAILED), &format!("{error}\n"))
    }

    pub fn input(&self) -> Result<Image<f32>> {
        load_image(self.path(files::INPUT))
    }

    pub fn refined(&self) -> Result<Image<f32>> {
        load_image(self.path(files::REFINED))
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.path(files::CONFIG))
    }

    pub fn latent(&self) -> Result<LatentCode<f32>> {
        latent_from_archive(&Archive::load(self.path(files::LATENT))?)
    }

    pub fn mask(&self) -> Result<DomainMask> {
        load_mask(self.path(files::MASK))
    }

    pub fn eval_records(&self) -> Result<Vec<EvalRecord>> {
        let path = self.path(files::EVAL);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(EvalRecord::from_line)
            .collect()
    }

    pub fn history(&self) -> Result<Vec<StepRecord>> {
        let path = self.path(files::HISTORY);
        parse_history(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }

    /// The frozen refinement, reconstructed from bundle files only.
    pub fn artifacts(&self) -> Result<RefinedArtifacts> {
        let generator = Arc::new(generator_from_archive(&Archive::load(self.path(files::GENERATOR))?)?);
        let state = state_from_delta(&Archive::load(self.path(files::THETA_DELTA))?, generator)?;
        Ok(RefinedArtifacts {
            state,
            latent: self.latent()?,
            feature: feature_from_archive(&Archive::load(self.path(files::FEATURE))?)?,
            mask_feat: load_mask(self.path(files::MASK_FEAT))?,
        })
    }
}

/// The image id used in records: the file stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Inverts one image file into `out_dir`. On failure the partial bundle is
/// kept with a `FAILED` marker and the stage-tagged error is returned.
pub fn run_invert(pipeline: &Pipeline, image_path: &Path, out_dir: &Path) -> Result<EvalRecord> {
    let bundle = RunBundle::create(out_dir)?;
    let result = invert_into(pipeline, image_path, &bundle);
    if let Err(e) = &result {
        bundle.mark_failed(e)?;
    }
    result
}

fn invert_into(pipeline: &Pipeline, image_path: &Path, bundle: &RunBundle) -> Result<EvalRecord> {
    bundle.write_setup(pipeline).map_err(|e| e.stage("write"))?;
    let image = load_image(image_path).map_err(|e| e.stage("input"))?;
    bundle.write_input(image_path).map_err(|e| e.stage("input"))?;
    let start = Instant::now();
    let coarse = pipeline.coarse(&image).map_err(|e| e.stage("embed"))?;
    let latent = pipeline.embed(&image, &coarse).map_err(|e| e.stage("embed"))?;
    let fp = pipeline.state.generator().fingerprint();
    bundle
        .write_embedding(&latent, &coarse.coarse_image, &fp)
        .map_err(|e| e.stage("embed"))?;
    let seg = pipeline.segment(&image, coarse).map_err(|e| e.stage("segment"))?;
    bundle.write_segmentation(&seg).map_err(|e| e.stage("segment"))?;
    let refined = pipeline
        .refine(&image, &latent, &seg.mask)
        .map_err(|e| e.stage("refine"))?;
    let output = refined
        .state
        .synthesize_with_injection(&latent, &refined.feature, &refined.mask_feat)
        .map_err(|e| e.stage("synthesize"))?;
    let wall_time = start.elapsed().as_secs_f64();
    bundle
        .write_refinement(&refined, &output)
        .map_err(|e| e.stage("refine"))?;
    // Score what was written, so the record matches the bundle's own files.
    let stored = bundle.refined().map_err(|e| e.stage("eval"))?;
    let record = pipeline
        .evaluate(&image_id(image_path), &stored, &image, wall_time)
        .map_err(|e| e.stage("eval"))?;
    bundle
        .write_eval(std::slice::from_ref(&record))
        .map_err(|e| e.stage("eval"))?;
    Ok(record)
}

/// Outcome of [`run_batch`].
#[derive(Clone, Debug, Default)]
pub struct BatchSummary {
    pub rows: Vec<EvalRecord>,
    /// `(image id, message)` for each failed image.
    pub failures: Vec<(String, String)>,
}

impl BatchSummary {
    /// Column means over successful rows: `(mse, perceptual, psnr)`.
    pub fn means(&self) -> Option<(f64, f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some((mean(&|r| r.mse), mean(&|r| r.perceptual), mean(&|r| r.psnr_db())))
    }

    /// Tab-separated rows, one failure row per failed image, then a `mean` row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("image\tmse\tperceptual\tpsnr\tstatus\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:e}\t{:e}\t{:.4}\tok\n",
                r.image_id,
                r.mse,
                r.perceptual,
                r.psnr_db()
            ));
        }
        for (id, msg) in &self.failures {
            s.push_str(&format!("{id}\t-\t-\t-\tfailed: {}\n", msg.replace(['\t', '\n'], " ")));
        }
        if let Some((mse, perceptual, psnr)) = self.means() {
            s.push_str(&format!(
                "mean\t{mse:e}\t{perceptual:e}\t{psnr:.4}\t{}\n",
                self.rows.len()
            ));
        }
        s
    }
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Inverts every PNG in `image_dir` into `out_dir/<stem>/` on up to
/// `workers` threads and writes `out_dir/summary.tsv`.
pub fn run_batch(pipeline: &Pipeline, image_dir: &Path, out_dir: &Path, workers: usize) -> Result<BatchSummary> {
    use rayon::prelude::*;
    let images = list_images(image_dir)?;
    if images.is_empty() {
        return Err(Error::Argument(format!("no PNG images in {}", image_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<EvalRecord>)> = pool.install(|| {
        images
            .par_iter()
            .map(|p| {
                let id = image_id(p);
                let r = run_invert(pipeline, p, &out_dir.join(&id));
                (id, r)
            })
            .collect()
    });
    let mut summary = BatchSummary::default();
    for (id, r) in results {
        match r {
            Ok(rec) => summary.rows.push(rec),
            Err(e) => summary.failures.push((id, e.to_string())),
        }
    }
    write_text(out_dir.join("summary.tsv"), &summary.to_table())?;
    Ok(summary)
}
