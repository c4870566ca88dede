//! Manifest-driven batch steps shared by the command-line tools: feature
//! extraction, labeling, embedding extraction and trial scoring.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Network, MIN_FRAMES};
use crate::error::{Error, Result};
use crate::frontend::{crop_segment, FeatureMatrix, Frontend};
use crate::real::Real;
use crate::scoring::{cosine_score, mean_embedding, postprocess, Score, Trial};
use crate::train::Example;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub path: PathBuf,
}

/// Parses `<utt-id> <speaker> <wav-path>` lines. Relative paths resolve
/// against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, speaker, path] = f.as_slice() else {
            return Err(Error::format(format!(
                "manifest line {}: expected '<utt-id> <speaker> <wav-path>', got {} fields",
                i + 1,
                f.len()
            )));
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::format(format!("manifest line {}: duplicate utterance id '{id}'", i + 1)));
        }
        let p = Path::new(path);
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        out.push(ManifestEntry { id: id.to_string(), speaker: speaker.to_string(), path });
    }
    if out.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&std::fs::read_to_string(path)?, base)
}

/// Class indices in sorted speaker order, with the speaker names.
pub fn speaker_labels(entries: &[ManifestEntry]) -> (Vec<usize>, Vec<String>) {
    let names: Vec<String> = entries.iter().map(|e| e.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    (entries.iter().map(|e| index[e.speaker.as_str()]).collect(), names)
}

/// Applies `f` to every item on up to `workers` threads; output order
/// matches input order and does not depend on the worker count.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|chunk| s.spawn(move || chunk.iter().map(f).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn extract_features(frontend: &Frontend, entries: &[ManifestEntry], workers: usize) -> Result<Vec<FeatureMatrix>> {
    parallel_map(entries, workers, |e| {
        frontend
            .process_file(&e.path)
            .map_err(|err| match err {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", e.path.display()))),
                other => Error::format(format!("{}: {other}", e.id)),
            })
    })
}

pub fn training_examples(entries: &[ManifestEntry], features: Vec<FeatureMatrix>) -> Vec<Example> {
    let (labels, _) = speaker_labels(entries);
    entries
        .iter()
        .zip(labels)
        .zip(features)
        .map(|((e, label), features)| Example { id: e.id.clone(), label, features })
        .collect()
}

/// Whole-utterance embedding; utterances shorter than the network's minimum
/// are tiled up to it.
pub fn embed_utterance<T: Real>(net: &Network<T>, f: &FeatureMatrix) -> Result<Vec<T>> {
    let x = if f.frames < MIN_FRAMES {
        crop_segment(f, MIN_FRAMES, &mut ChaCha8Rng::seed_from_u64(0))?.to_tensor()
    } else {
        f.to_tensor()
    };
    net.embed(&x.cast())
}

pub fn embed_all<T: Real>(net: &Network<T>, feats: &[FeatureMatrix], workers: usize) -> Result<Vec<Vec<T>>> {
    parallel_map(feats, workers, |f| embed_utterance(net, f))
}

/// Cosine scores after centering on `mean` and length normalization.
pub fn score_trials(
    embeddings: &HashMap<String, Vec<f64>>,
    trials: &[Trial],
    mean: Option<&[f64]>,
    workers: usize,
) -> Result<Vec<Score>> {
    let lookup = |id: &str| {
        embeddings.get(id).ok_or_else(|| Error::format(format!("no embedding for utterance '{id}'")))
    };
    let dim = embeddings.values().next().ok_or(Error::Empty("embedding archive"))?.len();
    let zero = vec![0.0; dim];
    let mean = mean.unwrap_or(&zero);
    parallel_map(trials, workers, |t| {
        let a = postprocess(lookup(&t.enroll)?, mean)?;
        let b = postprocess(lookup(&t.test)?, mean)?;
        Ok(Score { enroll: t.enroll.clone(), test: t.test.clone(), score: cosine_score(&a, &b)?, target: Some(t.target) })
    })
}

/// Centering mean over a set of embeddings, typically the training set's.
pub fn centering_mean<T: Real>(embs: &[Vec<T>]) -> Result<Vec<f64>> {
    let v: Vec<Vec<f64>> = embs.iter().map(|e| e.iter().map(|x| x.as_f64()).collect()).collect();
    mean_embedding(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# c\na s1 x.wav\n\nb s0 /abs/y.wav\n", Path::new("/base")).unwrap();
        assert_eq!(m[0].path, PathBuf::from("/base/x.wav"));
        assert_eq!(m[1].path, PathBuf::from("/abs/y.wav"));
        assert_eq!(speaker_labels(&m).0, vec![1, 0]);
        assert!(parse_manifest("a s1\n", Path::new(".")).is_err());
        assert!(parse_manifest("a s x\na s y\n", Path::new(".")).is_err());
        assert!(parse_manifest("\n", Path::new(".")).is_err());
    }

    #[test]
    fn parallel_order_is_stable() {
        let items: Vec<usize> = (0..37).collect();
        let one = parallel_map(&items, 1, |&i| Ok(i * i)).unwrap();
        for w in [2, 3, 8, 64] {
            assert_eq!(parallel_map(&items, w, |&i| Ok(i * i)).unwrap(), one);
        }
        assert!(parallel_map(&items, 4, |&i| if i == 20 { Err(Error::Empty("x")) } else { Ok(i) }).is_err());
    }
}
