//! Human-authored seed triplets that bootstrap instruction generation.
//!
//! Seeds are stored as JSON-lines, one object per line with the keys
//! `instruction`, `context`, `response` and `source_tag`. A missing `context`
//! or `source_tag` is read as the empty string.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Expected size of a full seed pool.
pub const DEFAULT_SEED_POOL_SIZE: usize = 80;

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("failed to read seed file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate (instruction, context) pairs on lines {}", format_groups(.groups))]
    Duplicate { groups: Vec<Vec<usize>> },
    #[error("seed file contains no records")]
    Empty,
    #[error("requested {requested} demonstrations but the pool only holds {available}")]
    NotEnoughSeeds { requested: usize, available: usize },
}

fn format_groups(groups: &[Vec<usize>]) -> String {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedExample {
    pub instruction: String,
    #[serde(default)]
    pub context: String,
    pub response: String,
    #[serde(default)]
    pub source_tag: String,
}

impl SeedExample {
    pub fn new(
        instruction: impl Into<String>,
        context: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        Self {
            instruction: instruction.into(),
            context: context.into(),
            response: response.into(),
            source_tag: String::new(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err("instruction is empty".into());
        }
        if self.response.trim().is_empty() {
            return Err("response is empty".into());
        }
        Ok(())
    }
}

/// A validated, immutable set of seeds in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedPool {
    seeds: Vec<SeedExample>,
}

impl SeedPool {
    /// Validates `seeds`; positions are reported as 1-based lines.
    pub fn new(seeds: Vec<SeedExample>) -> Result<Self, SeedError> {
        if seeds.is_empty() {
            return Err(SeedError::Empty);
        }
        for (i, seed) in seeds.iter().enumerate() {
            seed.check()
                .map_err(|message| SeedError::Invalid { line: i + 1, message })?;
        }
        let lines: Vec<usize> = (1..=seeds.len()).collect();
        check_duplicates(&seeds, &lines)?;
        Ok(Self { seeds })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SeedError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| SeedError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(BufReader::new(file)).map_err(|e| match e {
            SeedError::Io { source, .. } => SeedError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    /// Parses JSON-lines; blank lines are skipped but still counted.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, SeedError> {
        let mut seeds = Vec::new();
        let mut lines = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| SeedError::Io {
                path: PathBuf::new(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let seed: SeedExample =
                serde_json::from_str(&line).map_err(|e| SeedError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            seed.check().map_err(|message| SeedError::Invalid {
                line: line_no,
                message,
            })?;
            seeds.push(seed);
            lines.push(line_no);
        }
        if seeds.is_empty() {
            return Err(SeedError::Empty);
        }
        check_duplicates(&seeds, &lines)?;
        Ok(Self { seeds })
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for seed in &self.seeds {
            serde_json::to_writer(&mut out, seed)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> &[SeedExample] {
        &self.seeds
    }

    pub fn get(&self, index: usize) -> Option<&SeedExample> {
        self.seeds.get(index)
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// Draws `n` distinct pool indices uniformly without replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, SeedError> {
        if n == 0 || n > self.seeds.len() {
            return Err(SeedError::NotEnoughSeeds {
                requested: n,
                available: self.seeds.len(),
            });
        }
        Ok(rand::seq::index::sample(rng, self.seeds.len(), n).into_vec())
    }

    pub fn sample_demonstrations<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<&SeedExample>, SeedError> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| &self.seeds[i])
            .collect())
    }
}

fn check_duplicates(seeds: &[SeedExample], lines: &[usize]) -> Result<(), SeedError> {
    let mut first_seen: HashMap<(&str, &str), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of: HashMap<usize, usize> = HashMap::new();
    for (seed, &line) in seeds.iter().zip(lines) {
        let key = (seed.instruction.as_str(), seed.context.as_str());
        match first_seen.get(&key) {
            Some(&first) => {
                let g = *group_of.entry(first).or_insert_with(|| {
                    groups.push(vec![first]);
                    groups.len() - 1
                });
                groups[g].push(line);
            }
            None => {
                first_seen.insert(key, line);
            }
        }
    }
    if groups.is_empty() {
        Ok(())
    } else {
        Err(SeedError::Duplicate { groups })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn line(i: usize) -> String {
        format!(
            r#"{{"instruction":"Instruction {i}","context":"ctx {i}","response":"resp {i}","source_tag":"box"}}"#
        )
    }

    fn pool_text(n: usize) -> String {
        (0..n).map(line).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn loads_eighty_records() {
        let pool = SeedPool::from_reader(pool_text(DEFAULT_SEED_POOL_SIZE).as_bytes()).unwrap();
        assert_eq!(pool.len(), 80);
        assert_eq!(pool.seeds()[3].instruction, "Instruction 3");
    }

    #[test]
    fn loads_single_record() {
        let pool = SeedPool::from_reader(line(0).as_bytes()).unwrap();
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn missing_context_reads_as_empty() {
        let pool =
            SeedPool::from_reader(r#"{"instruction":"Define apoptosis.","response":"Cell death."}"#.as_bytes())
                .unwrap();
        assert_eq!(pool.seeds()[0].context, "");
        assert_eq!(pool.seeds()[0].source_tag, "");
    }

    #[test]
    fn duplicate_lines_are_named() {
        let mut lines: Vec<String> = (0..8).map(line).collect();
        lines[6] = line(2); // line 7 duplicates line 3
        let err = SeedPool::from_reader(lines.join("\n").as_bytes()).unwrap_err();
        match &err {
            SeedError::Duplicate { groups } => assert_eq!(groups, &vec![vec![3, 7]]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("3, 7"));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = format!("{}\n{{not json\n", line(0));
        match SeedPool::from_reader(text.as_bytes()).unwrap_err() {
            SeedError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_instruction_is_rejected() {
        let text = format!("{}\n{}", line(0), r#"{"instruction":"  ","response":"x"}"#);
        match SeedPool::from_reader(text.as_bytes()).unwrap_err() {
            SeedError::Invalid { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            SeedPool::from_reader("".as_bytes()),
            Err(SeedError::Empty)
        ));
        assert!(matches!(
            SeedPool::from_reader("\n\n".as_bytes()),
            Err(SeedError::Empty)
        ));
    }

    #[test]
    fn three_distinct_demonstrations() {
        let pool = SeedPool::from_reader(pool_text(80).as_bytes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let demos = pool.sample_demonstrations(3, &mut rng).unwrap();
        assert_eq!(demos.len(), 3);
        let distinct: HashSet<_> = demos.iter().map(|d| &d.instruction).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let pool = SeedPool::from_reader(pool_text(10).as_bytes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = pool.sample_indices(10, &mut rng).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_sample() {
        let pool = SeedPool::from_reader(pool_text(80).as_bytes()).unwrap();
        let a = pool
            .sample_indices(5, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        let b = pool
            .sample_indices(5, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversampling_fails() {
        let pool = SeedPool::from_reader(pool_text(2).as_bytes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pool.sample_indices(3, &mut rng),
            Err(SeedError::NotEnoughSeeds { requested: 3, available: 2 })
        ));
        assert!(pool.sample_indices(0, &mut rng).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_seed() -> impl Strategy<Value = SeedExample> {
            ("[a-zA-Z ]{0,6}[a-zA-Z]", "[ -~\n\"\\\\]{0,20}", "[a-z]{1,8}", "[a-z]{0,4}").prop_map(
                |(instruction, context, response, source_tag)| SeedExample {
                    instruction,
                    context,
                    response,
                    source_tag,
                },
            )
        }

        proptest! {
            #[test]
            fn serialize_round_trip(seeds in proptest::collection::vec(arb_seed(), 1..20)) {
                let mut seen = HashSet::new();
                let seeds: Vec<_> = seeds
                    .into_iter()
                    .filter(|s| seen.insert((s.instruction.clone(), s.context.clone())))
                    .collect();
                let pool = SeedPool::new(seeds).unwrap();
                let mut buf = Vec::new();
                pool.write_jsonl(&mut buf).unwrap();
                let back = SeedPool::from_reader(buf.as_slice()).unwrap();
                prop_assert_eq!(back, pool);
            }

            #[test]
            fn samples_are_pairwise_distinct(size in 1usize..60, frac in 0.0f64..1.0, seed: u64) {
                let pool = SeedPool::from_reader(pool_text(size).as_bytes()).unwrap();
                let n = 1 + ((size - 1) as f64 * frac) as usize;
                let idx = pool.sample_indices(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let set: HashSet<_> = idx.iter().collect();
                prop_assert_eq!(set.len(), n);
                let again = pool.sample_indices(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(idx, again);
            }
        }
    }
}
