use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

pub const SHAPE_CLASSES: [&str; 4] = ["square", "circle", "cross", "triangle"];

const NOISE_STD: f64 = 0.05;

/// Membership test for shape `class` centred at the origin with half-extent `r`.
fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => dx * dx + dy * dy <= r * r,
        2 => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        // apex up: width grows linearly from the top edge to the base
        _ => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Four-class grayscale dataset of filled shapes at random positions and
/// scales with gaussian pixel noise, clamped to `[0, 1]`.
pub fn synth_shapes(prng: &mut Prng, n: usize, image_size: usize) -> Result<ImageDataset> {
    if n == 0 || image_size < 8 {
        return Err(Error::Input(format!(
            "synth_shapes needs n >= 1 and image_size >= 8, got n={n}, size={image_size}"
        )));
    }
    let s = image_size as f64;
    let mut data = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = prng.below(SHAPE_CLASSES.len());
        let r = prng.uniform(0.2, 0.4) * s;
        let cx = prng.uniform(r, s - r);
        let cy = prng.uniform(r, s - r);
        let fg = prng.uniform(0.6, 1.0);
        let bg = prng.uniform(0.0, 0.2);
        for i in 0..image_size {
            for j in 0..image_size {
                let dx = j as f64 + 0.5 - cx;
                let dy = i as f64 + 0.5 - cy;
                let base = if inside(class, dx, dy, r) { fg } else { bg };
                data.push((base + NOISE_STD * prng.next_gaussian()).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, image_size, image_size], data)?;
    ImageDataset::new(images, labels, SHAPE_CLASSES.len(), "synth_shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = synth_shapes(&mut Prng::new(9), 20, 12).unwrap();
        let b = synth_shapes(&mut Prng::new(9), 20, 12).unwrap();
        assert_eq!(a, b);
        let c = synth_shapes(&mut Prng::new(10), 20, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_classes_and_unit_range() {
        let ds = synth_shapes(&mut Prng::new(1), 1000, 16).unwrap();
        let mut counts = [0usize; 4];
        for &l in ds.labels() {
            counts[l] += 1;
        }
        for c in counts {
            assert!((187..=313).contains(&c), "{counts:?}");
        }
        assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds.images().shape(), &[1000, 1, 16, 16]);
    }

    #[test]
    fn shapes_differ_in_mass() {
        // areas 4r^2 > pi r^2 > 20r^2/9 > 2r^2
        let area = |class| {
            let mut k = 0;
            for i in -100..=100 {
                for j in -100..=100 {
                    if inside(class, j as f64 / 10.0, i as f64 / 10.0, 10.0) {
                        k += 1;
                    }
                }
            }
            k
        };
        let a: Vec<usize> = (0..4).map(area).collect();
        assert!(a[0] > a[1] && a[1] > a[2] && a[2] > a[3], "{a:?}");
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(synth_shapes(&mut Prng::new(0), 0, 16).is_err());
        assert!(synth_shapes(&mut Prng::new(0), 4, 7).is_err());
    }
}
