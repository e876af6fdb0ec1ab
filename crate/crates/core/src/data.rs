//! Synthetic sequence-to-sequence tasks, padding/batching, and the
//! line-delimited dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// Token id space: four fixed specials followed by content ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size <= NUM_SPECIAL {
            return Err(Error::config(format!(
                "vocabulary size {size} leaves no content ids"
            )));
        }
        Ok(Self { size })
    }

    pub fn with_content(content: usize) -> Result<Self> {
        Self::new(NUM_SPECIAL + content)
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIAL..self.size
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id >= self.size {
            Err(Error::Vocabulary {
                id,
                vocab: self.size,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    /// Target without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        strip_eos(&self.tgt)
    }
}

/// Cuts a sequence at its first EOS.
pub fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.iter().position(|&t| t == EOS) {
        Some(p) => &ids[..p],
        None => ids,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    Cipher,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            "cipher" => Ok(Self::Cipher),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            content_vocab: 32,
            min_len: 4,
            max_len: 12,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::with_content(self.content_vocab)
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.content_vocab == 0 {
            return Err(Error::config("content_vocab must be at least 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "content lengths [{}, {}] must satisfy 1 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if self.max_len + 1 > t_max {
            return Err(Error::config(format!(
                "max content length {} leaves no room for EOS within t_max {t_max}",
                self.max_len
            )));
        }
        Ok(())
    }

    /// Seed-derived permutation `π` of the content ids, indexed by
    /// `id − NUM_SPECIAL`.
    pub fn cipher_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (NUM_SPECIAL..NUM_SPECIAL + self.content_vocab).collect();
        Rng::new(self.seed).fork(0x5eed).shuffle(&mut perm);
        perm
    }

    /// Gold content target for a source under this task.
    pub fn target_for(&self, src: &[usize], perm: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut v = src.to_vec();
                v.sort_unstable();
                v
            }
            TaskKind::Cipher => adjacent_swap(src)
                .into_iter()
                .map(|id| perm[id - NUM_SPECIAL])
                .collect(),
        }
    }
}

/// Swaps positions (0,1), (2,3), …; an odd tail stays in place.
pub fn adjacent_swap(src: &[usize]) -> Vec<usize> {
    let mut out = src.to_vec();
    for pair in out.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
    out
}

/// Deterministic examples for `spec`. Every target ends with EOS.
pub fn generate(spec: &TaskSpec, n: usize, t_max: usize) -> Result<Vec<Example>> {
    spec.validate(t_max)?;
    let perm = spec.cipher_permutation();
    let mut rng = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.range_inclusive(spec.min_len, spec.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| NUM_SPECIAL + rng.below(spec.content_vocab))
            .collect();
        let mut tgt = spec.target_for(&src, &perm);
        tgt.push(EOS);
        out.push(Example { src, tgt });
    }
    Ok(out)
}

pub fn save(examples: &[Example], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// A padded group of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Position of each row in the input example list.
    pub indices: Vec<usize>,
    /// Sources padded with PAD to the longest source in the batch.
    pub src_ids: Vec<Vec<usize>>,
    /// Targets padded with PAD to `t_max`.
    pub tgt_ids: Vec<Vec<usize>>,
    /// True exactly at padded target positions.
    pub tgt_pad_mask: Vec<Vec<bool>>,
    /// Un-padded target lengths, EOS included.
    pub gold_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Source row without its padding.
    pub fn source(&self, row: usize) -> &[usize] {
        let s = &self.src_ids[row];
        let len = s.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
        &s[..len]
    }

    /// Target row up to its gold length.
    pub fn target(&self, row: usize) -> &[usize] {
        &self.tgt_ids[row][..self.gold_lengths[row]]
    }
}

pub fn make_batch(examples: &[Example], indices: &[usize], t_max: usize) -> Result<Batch> {
    let mut max_src = 0;
    for &i in indices {
        let ex = &examples[i];
        if ex.tgt.len() > t_max {
            return Err(Error::Oversize {
                index: i,
                reason: format!("target length {} exceeds t_max {t_max}", ex.tgt.len()),
            });
        }
        if ex.src.is_empty() || ex.tgt.is_empty() {
            return Err(Error::Oversize {
                index: i,
                reason: "empty source or target".into(),
            });
        }
        max_src = max_src.max(ex.src.len());
    }
    let mut b = Batch {
        indices: indices.to_vec(),
        src_ids: Vec::with_capacity(indices.len()),
        tgt_ids: Vec::with_capacity(indices.len()),
        tgt_pad_mask: Vec::with_capacity(indices.len()),
        gold_lengths: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let ex = &examples[i];
        let mut src = ex.src.clone();
        src.resize(max_src, PAD);
        let mut tgt = ex.tgt.clone();
        tgt.resize(t_max, PAD);
        b.src_ids.push(src);
        b.tgt_ids.push(tgt);
        b.tgt_pad_mask
            .push((0..t_max).map(|p| p >= ex.tgt.len()).collect());
        b.gold_lengths.push(ex.tgt.len());
    }
    Ok(b)
}

/// Shuffles with `rng` and cuts into batches of at most `per_batch`.
pub fn make_batches(
    examples: &[Example],
    t_max: usize,
    per_batch: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if per_batch == 0 {
        return Err(Error::config("examples per batch must be positive"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(per_batch)
        .map(|idx| make_batch(examples, idx, t_max))
        .collect()
}

/// Batches in input order, without shuffling.
pub fn sequential_batches(
    examples: &[Example],
    t_max: usize,
    per_batch: usize,
) -> Result<Vec<Batch>> {
    if per_batch == 0 {
        return Err(Error::config("examples per batch must be positive"));
    }
    let order: Vec<usize> = (0..examples.len()).collect();
    order
        .chunks(per_batch)
        .map(|idx| make_batch(examples, idx, t_max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn task_examples() {
        let id: Vec<usize> = (NUM_SPECIAL..NUM_SPECIAL + 32).collect();
        let src = [5, 7, 9];
        assert_eq!(spec(TaskKind::Copy).target_for(&src, &id), vec![5, 7, 9]);
        assert_eq!(spec(TaskKind::Reverse).target_for(&src, &id), vec![9, 7, 5]);
        assert_eq!(
            spec(TaskKind::Sort).target_for(&[9, 5, 7], &id),
            vec![5, 7, 9]
        );
        assert_eq!(spec(TaskKind::Cipher).target_for(&src, &id), vec![7, 5, 9]);
    }

    #[test]
    fn generated_targets_end_with_eos_and_match_the_task() {
        for kind in [
            TaskKind::Copy,
            TaskKind::Reverse,
            TaskKind::Sort,
            TaskKind::Cipher,
        ] {
            let s = spec(kind);
            let perm = s.cipher_permutation();
            for ex in generate(&s, 200, 16).unwrap() {
                assert_eq!(*ex.tgt.last().unwrap(), EOS);
                assert_eq!(ex.content(), s.target_for(&ex.src, &perm).as_slice());
                assert!((4..=12).contains(&ex.src.len()));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(TaskKind::Cipher);
        assert_eq!(generate(&s, 50, 16).unwrap(), generate(&s, 50, 16).unwrap());
        let other = TaskSpec {
            seed: 1,
            ..s.clone()
        };
        assert_ne!(
            generate(&s, 50, 16).unwrap(),
            generate(&other, 50, 16).unwrap()
        );
    }

    #[test]
    fn cipher_permutation_is_invertible() {
        let s = spec(TaskKind::Cipher);
        let perm = s.cipher_permutation();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p - NUM_SPECIAL] = i + NUM_SPECIAL;
        }
        for ex in generate(&s, 100, 16).unwrap() {
            let undone: Vec<usize> = ex
                .content()
                .iter()
                .map(|&t| inverse[t - NUM_SPECIAL])
                .collect();
            assert_eq!(undone, adjacent_swap(&ex.src));
        }
    }

    #[test]
    fn lengths_cover_the_range() {
        let s = TaskSpec {
            min_len: 3,
            max_len: 10,
            ..spec(TaskKind::Copy)
        };
        let mut seen = [false; 11];
        for ex in generate(&s, 1000, 16).unwrap() {
            seen[ex.src.len()] = true;
        }
        assert!((3..=10).all(|l| seen[l]));
    }

    #[test]
    fn oversize_spec_is_a_config_error() {
        let s = TaskSpec {
            max_len: 16,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&s, 1, 16), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let exs = generate(&spec(TaskKind::Reverse), 100, 16).unwrap();
        save(&exs, &path).unwrap();
        assert_eq!(load(&path).unwrap(), exs);

        std::fs::write(&path, "").unwrap();
        assert!(load(&path).unwrap().is_empty());

        std::fs::write(&path, "{\"src\":[4,5],\"tgt\":[5,4,2]}\n").unwrap();
        assert_eq!(
            load(&path).unwrap(),
            vec![Example {
                src: vec![4, 5],
                tgt: vec![5, 4, 2]
            }]
        );

        std::fs::write(&path, "{\"src\":[4],\"tgt\":[4,2]}\nnot json\n").unwrap();
        match load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batching_examples() {
        let ex = vec![Example {
            src: vec![4, 5],
            tgt: vec![5, 4, EOS],
        }];
        let mut rng = Rng::new(0);
        let b = make_batches(&ex, 8, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 1);
        assert_eq!(b[0].gold_lengths, vec![3]);
        let mask: Vec<bool> = (0..8).map(|p| p >= 3).collect();
        assert_eq!(b[0].tgt_pad_mask[0], mask);
        assert_eq!(b[0].target(0), &[5, 4, EOS]);

        let many = generate(&TaskSpec::default(), 37, 16).unwrap();
        let a = make_batches(&many, 16, 8, &mut Rng::new(3)).unwrap();
        let c = make_batches(&many, 16, 8, &mut Rng::new(3)).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.len(), 5);

        let big = vec![Example {
            src: vec![4],
            tgt: vec![4; 9],
        }];
        match make_batches(&big, 8, 1, &mut rng) {
            Err(Error::Oversize { index, .. }) => assert_eq!(index, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn source_padding_is_stripped() {
        let exs = vec![
            Example {
                src: vec![4, 5, 6],
                tgt: vec![4, EOS],
            },
            Example {
                src: vec![7],
                tgt: vec![7, EOS],
            },
        ];
        let b = sequential_batches(&exs, 4, 2).unwrap();
        assert_eq!(b[0].src_ids[1], vec![7, PAD, PAD]);
        assert_eq!(b[0].source(1), &[7]);
    }
}
