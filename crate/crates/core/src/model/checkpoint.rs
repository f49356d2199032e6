//! Single-file JSON checkpoints: a header (format, config, metric names,
//! seed, stage), the embedded vocabulary, and every parameter as a
//! hex-encoded little-endian `f64` blob with its shape.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Scorer, Stage};
use crate::numerics::Tensor;
use crate::vocab::{TrajectoryVocabulary, VocabFileIn, VocabFileOut};
use crate::world::METRIC_NAMES;

const FORMAT: &str = "trajmoe-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub vocabulary: TrajectoryVocabulary,
    pub scorer: Scorer,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format: &'static str,
    version: u32,
    stage: Stage,
    seed: u64,
    metric_names: [&'static str; 5],
    config: &'a ModelConfig,
    vocabulary: VocabFileOut,
    params: Vec<ParamRecord>,
}

#[derive(Deserialize)]
struct FileIn {
    format: String,
    version: u32,
    stage: Stage,
    seed: u64,
    metric_names: Vec<String>,
    config: ModelConfig,
    vocabulary: VocabFileIn,
    params: Vec<ParamRecord>,
}

fn encode(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn decode(rec: &ParamRecord) -> Result<Tensor, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(format!("parameter {}: {m}", rec.name));
    let bytes = hex::decode(&rec.data).map_err(|e| bad(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(bad(format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(rec.shape.clone(), data).map_err(|e| bad(e.to_string()))
}

impl Checkpoint {
    pub fn new(stage: Stage, seed: u64, vocabulary: TrajectoryVocabulary, scorer: Scorer) -> Result<Self, ModelError> {
        scorer.check_vocabulary(&vocabulary)?;
        Ok(Self {
            stage,
            seed,
            vocabulary,
            scorer,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let file = FileOut {
            format: FORMAT,
            version: VERSION,
            stage: self.stage,
            seed: self.seed,
            metric_names: METRIC_NAMES,
            config: self.scorer.config(),
            vocabulary: VocabFileOut::from(&self.vocabulary),
            params: self
                .scorer
                .params
                .iter()
                .map(|(_, name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: encode(t),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &file)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, ModelError> {
        let file: FileIn = serde_json::from_reader(r)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format {} version {}",
                file.format, file.version
            )));
        }
        if file.metric_names != METRIC_NAMES {
            return Err(ModelError::Checkpoint(format!("unexpected metric names {:?}", file.metric_names)));
        }
        file.config.validate()?;
        let named = file
            .params
            .iter()
            .map(|rec| Ok((rec.name.clone(), decode(rec)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let scorer = Scorer::from_named(&file.config, named)?;
        let vocabulary = TrajectoryVocabulary::try_from(file.vocabulary)?;
        Checkpoint::new(file.stage, file.seed, vocabulary, scorer)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)?;
        Checkpoint::read(std::io::BufReader::new(f))
    }
}
