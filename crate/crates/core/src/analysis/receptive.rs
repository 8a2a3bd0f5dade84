use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{channel_plan, FusedNetSpec};
use crate::tensor::LayerKind;

/// Receptive-field extent and cumulative stride of a layer path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
}

/// r ← r + (k − 1)·j, j ← j·s over the convolutions and pools of `path`.
pub fn receptive_field(path: &[LayerKind]) -> ReceptiveField {
    let (mut r, mut j) = (1, 1);
    for kind in path {
        let (k, s) = match kind {
            LayerKind::Conv3x3 => (3, 1),
            LayerKind::Conv1x1 => (1, 1),
            LayerKind::MaxPool2 => (2, 2),
            _ => continue,
        };
        r += (k - 1) * j;
        j *= s;
    }
    ReceptiveField { size: r, jump: j }
}

/// Layer kinds along the path taking member `choice[b]`'s block at stage b,
/// shared stage pools included.
pub fn chain_kinds(spec: &FusedNetSpec, choice: &[usize]) -> Result<Vec<LayerKind>> {
    let plan = channel_plan(spec).map_err(Error::Validation)?;
    if choice.len() != spec.block_count() || choice.iter().any(|&k| k >= spec.member_count()) {
        return Err(Error::InvalidArgument(format!(
            "path {choice:?} must pick one of {} members for each of {} stages",
            spec.member_count(),
            spec.block_count()
        )));
    }
    let mut out = Vec::new();
    for (b, &k) in choice.iter().enumerate() {
        if plan.stage_pool[b] {
            out.push(LayerKind::MaxPool2);
        }
        out.extend(spec.members[k].resolved[b].layers.iter().map(|l| l.kind));
    }
    Ok(out)
}

/// Smallest and largest receptive field over all K^B block paths.
pub fn receptive_field_range(spec: &FusedNetSpec) -> Result<(ReceptiveField, ReceptiveField)> {
    let (k, b) = (spec.member_count(), spec.block_count());
    let paths = k.checked_pow(b as u32).filter(|&n| n <= 1 << 16).ok_or_else(|| {
        Error::InvalidArgument(format!("{k}^{b} paths are too many to enumerate"))
    })?;
    let mut lo: Option<ReceptiveField> = None;
    let mut hi: Option<ReceptiveField> = None;
    for code in 0..paths {
        let mut c = code;
        let choice: Vec<usize> = (0..b)
            .map(|_| {
                let v = c % k;
                c /= k;
                v
            })
            .collect();
        let rf = receptive_field(&chain_kinds(spec, &choice)?);
        if lo.is_none_or(|l| rf.size < l.size) {
            lo = Some(rf);
        }
        if hi.is_none_or(|h| rf.size > h.size) {
            hi = Some(rf);
        }
    }
    Ok((lo.expect("at least one path"), hi.expect("at least one path")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin_spec;
    use crate::tensor::{conv2d, maxpool2, LayerParams, Shape, Tensor};
    use LayerKind::*;

    /// Empirical support: with positive weights and a zero input, a column
    /// influences the centre output exactly when it lies in the field.
    fn probe(path: &[LayerKind]) -> usize {
        let (h, w) = (8, 128);
        let run = |x: Tensor<f64>| {
            let mut y = x;
            for kind in path {
                y = match kind {
                    Conv3x3 | Conv1x1 => {
                        let mut p = if *kind == Conv3x3 {
                            LayerParams::conv3x3(1, 1)
                        } else {
                            LayerParams::conv1x1(1, 1)
                        };
                        p.weights.iter_mut().for_each(|v| *v = 0.5);
                        conv2d(&y, &p).unwrap()
                    }
                    MaxPool2 => maxpool2(&y).unwrap().0,
                    _ => y,
                };
            }
            y
        };
        let out = run(Tensor::zeros(Shape::new(1, 1, h, w)));
        let (oh, ow) = (out.shape().h / 2, out.shape().w / 2);
        (0..w)
            .filter(|&col| {
                let x = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, c| if c == col { 1.0 } else { 0.0 });
                run(x).at(0, 0, oh, ow) != 0.0
            })
            .count()
    }

    #[test]
    fn recurrence_examples() {
        assert_eq!(receptive_field(&[Conv3x3]).size, 3);
        let n33 = [Conv3x3, MaxPool2, Conv3x3, MaxPool2, Conv3x3];
        assert_eq!(receptive_field(&n33), ReceptiveField { size: 18, jump: 4 });
        assert_eq!(probe(&n33), 18);
        assert_eq!(probe(&[Conv3x3]), 3);
    }

    #[test]
    fn catalog_chains_agree_with_the_probe() {
        let spec = builtin_spec("N13N33").unwrap();
        let outer = chain_kinds(&spec, &[0, 0, 0]).unwrap();
        let inner = chain_kinds(&spec, &[1, 1, 1]).unwrap();
        assert_eq!(inner, [Conv3x3, MaxPool2, Conv3x3, MaxPool2, Conv3x3]);
        assert_eq!(receptive_field(&outer).size, 86);
        assert_eq!(probe(&outer), 86);
        assert_eq!(probe(&inner), 18);
        for name in ["N16", "N33N43", "N46N16"] {
            if let Ok(s) = builtin_spec(name) {
                let path = chain_kinds(&s, &vec![0; s.block_count()]).unwrap();
                assert_eq!(probe(&path), receptive_field(&path).size, "{name}");
            }
        }
        let (lo, hi) = receptive_field_range(&spec).unwrap();
        assert_eq!((lo.size, hi.size), (18, 86));
        assert!(chain_kinds(&spec, &[0, 2, 0]).is_err());
    }
}
