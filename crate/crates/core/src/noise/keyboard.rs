//! Synthetic typos from a Gaussian touch model over a QWERTY layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NoiseError;

/// Key centers in key-pitch units.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyboardLayout {
    keys: Vec<(char, f64, f64)>,
}

impl KeyboardLayout {
    pub fn qwerty() -> Self {
        let rows = [("qwertyuiop", 0.0), ("asdfghjkl", 0.5), ("zxcvbnm", 1.5)];
        let mut keys = Vec::new();
        for (y, (row, offset)) in rows.iter().enumerate() {
            for (x, c) in row.chars().enumerate() {
                keys.push((c, x as f64 + offset, y as f64));
            }
        }
        keys.push((' ', 4.5, 3.0));
        Self { keys }
    }

    pub fn keys(&self) -> &[(char, f64, f64)] {
        &self.keys
    }

    pub fn center(&self, c: char) -> Option<(f64, f64)> {
        self.keys.iter().find(|k| k.0 == c).map(|k| (k.1, k.2))
    }

    /// Key whose center is closest to the touch point; ties go to the
    /// earlier key.
    pub fn nearest(&self, x: f64, y: f64) -> char {
        let mut best = (f64::INFINITY, ' ');
        for &(c, kx, ky) in &self.keys {
            let d = (kx - x).powi(2) + (ky - y).powi(2);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPair {
    pub noisy: String,
    pub clean: String,
}

/// Emits `variants` noisy renderings of each word. Every character on the
/// layout is typed at its key center plus isotropic Gaussian jitter of
/// standard deviation `sigma`; characters off the layout pass through.
pub fn gen_synthetic<S: AsRef<str>>(
    words: &[S],
    layout: &KeyboardLayout,
    sigma: f64,
    variants: usize,
    seed: u64,
) -> Result<Vec<SyntheticPair>, NoiseError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(NoiseError::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let jitter = Normal::new(0.0, sigma).map_err(|e| NoiseError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(words.len() * variants);
    for word in words {
        let word = word.as_ref();
        for _ in 0..variants {
            let noisy = word
                .chars()
                .map(|c| match layout.center(c) {
                    Some((x, y)) => {
                        layout.nearest(x + jitter.sample(&mut rng), y + jitter.sample(&mut rng))
                    }
                    None => c,
                })
                .collect();
            out.push(SyntheticPair {
                noisy,
                clean: word.to_string(),
            });
        }
    }
    Ok(out)
}
