use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HeadError;

/// Draws `shots` examples per class and returns their indices, sorted.
///
/// Classes are visited in index order from a single seeded stream.
pub fn fewshot_sample(
    labels: &[usize],
    class_names: &[String],
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>, HeadError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, &y) in labels.iter().enumerate() {
        let bucket = by_class
            .get_mut(y)
            .ok_or_else(|| HeadError::Shape(format!("label {y} outside [0, {})", class_names.len())))?;
        bucket.push(i);
    }
    if let Some((k, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() < shots) {
        return Err(HeadError::ClassDeficit {
            class: class_names[k].clone(),
            available: idx.len(),
            requested: shots,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(shots * class_names.len());
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..shots]);
    }
    out.sort_unstable();
    Ok(out)
}
