use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD_ID;
use super::Vocabulary;
use crate::error::{Error, Result};

/// Reads `token v_1 .. v_dim` lines into a `[|V|, dim]` matrix. Tokens missing
/// from the file get uniform `[-0.1, 0.1]` rows drawn from `seed`; the pad row
/// is zero.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            continue;
        };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                line: i + 1,
                expected: dim,
                found: values.len(),
            });
        }
        let id = vocab.id(token);
        if vocab.token(id) == token {
            found.entry(id).or_insert(values);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((vocab.len(), dim));
    for id in 0..vocab.len() {
        if id == PAD_ID {
            continue;
        }
        let mut row = out.row_mut(id);
        match found.get(&id) {
            Some(v) => row.iter_mut().zip(v).for_each(|(a, b)| *a = *b),
            None => row.iter_mut().for_each(|a| *a = rng.random_range(-0.1..=0.1)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(text: &str) -> (tempfile::TempDir, std::path::PathBuf, Vocabulary) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, text).unwrap();
        (dir, path, Vocabulary::from_tokens(["cat", "dog"]))
    }

    #[test]
    fn copies_known_rows_and_zeroes_pad() {
        let (_d, path, vocab) = setup("cat 0.5 -1 2\nzebra 1 1 1\n");
        let m = load_pretrained_embeddings(&path, &vocab, 3, 7).unwrap();
        assert_eq!(m.row(vocab.id("cat")).to_vec(), vec![0.5, -1.0, 2.0]);
        assert!(m.row(PAD_ID).iter().all(|&x| x == 0.0));
        let dog = m.row(vocab.id("dog"));
        assert!(dog.iter().all(|&x| (-0.1..=0.1).contains(&x)));
    }

    #[test]
    fn missing_rows_are_reproducible() {
        let (_d, path, vocab) = setup("cat 0.5 -1 2\n");
        let a = load_pretrained_embeddings(&path, &vocab, 3, 42).unwrap();
        let b = load_pretrained_embeddings(&path, &vocab, 3, 42).unwrap();
        let c = load_pretrained_embeddings(&path, &vocab, 3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let (_d, path, vocab) = setup("cat 1 2 3\ndog 1 2\n");
        match load_pretrained_embeddings(&path, &vocab, 3, 0) {
            Err(Error::Dimension { line, found, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
