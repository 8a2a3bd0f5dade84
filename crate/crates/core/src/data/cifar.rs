use std::path::{Path, PathBuf};

use super::{CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Pixel bytes per record: 1024 red, 1024 green, 1024 blue, row-major.
pub const RECORD_PIXELS: usize = 3 * 32 * 32;

/// Decode a CIFAR binary file. `expected` is the required record count.
pub fn decode_records(
    bytes: &[u8],
    variant: CifarVariant,
    split: Split,
    expected: Option<usize>,
) -> Result<Dataset> {
    let rec = variant.record_len();
    let whole = bytes.len() / rec;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format {
            offset: whole * rec,
            message: format!(
                "truncated record: {} trailing bytes, a {variant} record has {rec}",
                bytes.len() - whole * rec
            ),
        });
    }
    if let Some(n) = expected {
        if whole != n {
            return Err(Error::Format {
                offset: bytes.len(),
                message: format!("expected {n} records, found {whole}"),
            });
        }
    }
    let classes = variant.classes();
    let mut labels = Vec::with_capacity(whole);
    let mut coarse = Vec::with_capacity(whole);
    let mut pixels = Vec::with_capacity(whole * RECORD_PIXELS);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: i * rec + variant.label_bytes() - 1,
                message: format!("label {label} is outside [0, {classes})"),
            });
        }
        if variant == CifarVariant::C100 {
            coarse.push(record[0] as usize);
        }
        labels.push(label);
        pixels.extend(record[variant.label_bytes()..].iter().map(|&p| p as f32));
    }
    Ok(Dataset {
        images: Tensor::from_vec(Shape::new(whole, 3, 32, 32), pixels)?,
        labels,
        coarse_labels: (variant == CifarVariant::C100).then_some(coarse),
        num_classes: classes,
        split,
    })
}

/// Inverse of [`decode_records`]. Pixels are rounded and clamped to bytes.
pub fn encode_records(data: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    let s = data.images.shape();
    if (s.c, s.h, s.w) != (3, 32, 32) {
        return Err(Error::Shape(format!("CIFAR records hold 3x32x32 images, got {s}")));
    }
    let mut out = Vec::with_capacity(data.len() * variant.record_len());
    for n in 0..data.len() {
        if variant == CifarVariant::C100 {
            let coarse = data.coarse_labels.as_ref().map_or(0, |c| c[n]);
            out.push(coarse as u8);
        }
        out.push(data.labels[n] as u8);
        out.extend(
            data.images
                .sample(n)
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

fn files(variant: CifarVariant, split: Split) -> (&'static [&'static str], &'static str, usize) {
    match (variant, split) {
        (CifarVariant::C10, Split::Train) => (
            &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            "cifar-10-batches-bin",
            10_000,
        ),
        (CifarVariant::C10, Split::Test) => (&["test_batch.bin"], "cifar-10-batches-bin", 10_000),
        (CifarVariant::C100, Split::Train) => (&["train.bin"], "cifar-100-binary", 50_000),
        (CifarVariant::C100, Split::Test) => (&["test.bin"], "cifar-100-binary", 10_000),
    }
}

/// Load a split from the standard binary distribution. `dir` may be the
/// directory holding the `.bin` files or its parent.
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let (names, subdir, per_file) = files(variant, split);
    let base: PathBuf = if dir.join(names[0]).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(subdir)
    };
    let mut parts = Vec::with_capacity(names.len());
    for name in names {
        let path = base.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let part = decode_records(&bytes, variant, split, Some(per_file)).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        parts.push(part);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    let total: usize = parts.iter().map(Dataset::len).sum();
    let mut pixels = Vec::with_capacity(total * RECORD_PIXELS);
    let mut labels = Vec::with_capacity(total);
    for p in parts {
        labels.extend(p.labels);
        pixels.extend(p.images.into_vec());
    }
    Dataset::new(
        Tensor::from_vec(Shape::new(total, 3, 32, 32), pixels)?,
        labels,
        variant.classes(),
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(variant: CifarVariant) -> Vec<u8> {
        let mut bytes = Vec::new();
        for r in 0..2u8 {
            if variant == CifarVariant::C100 {
                bytes.push(10 + r);
            }
            bytes.push(r * 7);
            bytes.extend((0..RECORD_PIXELS).map(|i| ((i * 31 + r as usize * 5) % 256) as u8));
        }
        bytes
    }

    #[test]
    fn two_record_fixture_decodes_exactly() {
        let bytes = fixture(CifarVariant::C10);
        let d = decode_records(&bytes, CifarVariant::C10, Split::Train, Some(2)).unwrap();
        assert_eq!(d.labels, [0, 7]);
        // red plane first, row-major: pixel (c=1, h=2, w=3) is byte 1024 + 2*32 + 3
        let i = 1024 + 2 * 32 + 3;
        assert_eq!(d.images.at(1, 1, 2, 3), ((i * 31 + 5) % 256) as f32);
        assert_eq!(encode_records(&d, CifarVariant::C10).unwrap(), bytes);
    }

    #[test]
    fn c100_uses_the_fine_label() {
        let bytes = fixture(CifarVariant::C100);
        let d = decode_records(&bytes, CifarVariant::C100, Split::Test, None).unwrap();
        assert_eq!(d.labels, [0, 7]);
        assert_eq!(d.coarse_labels.as_deref(), Some(&[10, 11][..]));
        assert_eq!(encode_records(&d, CifarVariant::C100).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_count_errors_carry_offsets() {
        let bytes = fixture(CifarVariant::C10);
        let err = decode_records(&bytes[..5000], CifarVariant::C10, Split::Train, None).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3073, .. }), "{err}");
        let err = decode_records(&bytes, CifarVariant::C10, Split::Train, Some(3)).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 6146, .. }), "{err}");
    }

    #[test]
    fn loads_from_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&sub).unwrap();
        let mut bytes = Vec::new();
        for _ in 0..5000 {
            bytes.extend(fixture(CifarVariant::C10));
        }
        std::fs::write(sub.join("test_batch.bin"), &bytes).unwrap();
        let d = load_cifar(dir.path(), CifarVariant::C10, Split::Test).unwrap();
        assert_eq!(d.len(), 10_000);
        assert!(load_cifar(dir.path(), CifarVariant::C10, Split::Train).is_err());
    }
}
