use std::fmt::Write as _;

use serde::Serialize;

use super::exchange::{enumerate_groupings, grouping_bound};
use super::params::count_spec_params;
use super::paths::{path_metrics, PathMetrics};
use super::receptive::{chain_kinds, receptive_field, receptive_field_range, ReceptiveField};
use crate::error::{Error, Result};
use crate::netspec::{channel_plan, FusedNetSpec};

/// One member's chain as built: own blocks at every stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemberSummary {
    pub name: String,
    pub block_sizes: Vec<usize>,
    pub depth: usize,
    pub params: usize,
    pub receptive_field: ReceptiveField,
}

/// Per-stage metrics, keyed by the 1-based stage number.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub block_sizes: Vec<usize>,
    /// From x̄_stage to the final representation.
    pub shortest_to_output: usize,
    /// From the input to x̄_stage.
    pub shortest_from_input: usize,
    pub pool: bool,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub spec: String,
    pub members: usize,
    pub blocks: usize,
    pub num_classes: usize,
    pub params: usize,
    pub head_params: usize,
    pub paths: PathMetrics,
    pub stages: Vec<StageMetrics>,
    pub grouping_count: usize,
    pub grouping_bound: u128,
    pub receptive_fields: Vec<MemberSummary>,
    pub receptive_field_min: Option<ReceptiveField>,
    pub receptive_field_max: Option<ReceptiveField>,
}

/// Groupings are enumerated only up to this count; beyond it only the bound
/// is reported.
const MAX_ENUMERATED: u128 = 1 << 16;

pub fn analyze(spec: &FusedNetSpec) -> Result<AnalysisReport> {
    let plan = channel_plan(spec).map_err(Error::Validation)?;
    let params = count_spec_params(spec)?;
    let paths = path_metrics(spec)?;
    let (k, b) = (spec.member_count(), spec.block_count());
    let bound = grouping_bound(k, b);
    let grouping_count = if bound <= MAX_ENUMERATED {
        enumerate_groupings(k, b).len()
    } else {
        0
    };
    let receptive_fields = spec
        .members
        .iter()
        .enumerate()
        .map(|(m, member)| {
            Ok(MemberSummary {
                name: member.name.clone(),
                block_sizes: member.block_sizes(),
                depth: member.block_sizes().iter().sum(),
                params: params.blocks[m].iter().sum(),
                receptive_field: receptive_field(&chain_kinds(spec, &vec![m; b])?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let range = receptive_field_range(spec).ok();
    let stages = (0..b)
        .map(|t| StageMetrics {
            stage: t + 1,
            block_sizes: paths.block_sizes.iter().map(|row| row[t]).collect(),
            shortest_to_output: paths.shortest_to_output[t + 1],
            shortest_from_input: paths.shortest_from_input[t + 1],
            pool: plan.stage_pool[t],
            out_channels: plan.stage_out[t],
        })
        .collect();
    Ok(AnalysisReport {
        spec: spec.name.clone(),
        members: k,
        blocks: b,
        num_classes: spec.num_classes,
        params: params.total,
        head_params: params.head,
        paths,
        stages,
        grouping_count,
        grouping_bound: bound,
        receptive_fields,
        receptive_field_min: range.map(|r| r.0),
        receptive_field_max: range.map(|r| r.1),
    })
}

/// Left-aligned first column, right-aligned rest.
fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(out, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    line(out, &widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
    for row in rows {
        line(out, row);
    }
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Layer, block and parameter tables for a spec.
pub fn describe(spec: &FusedNetSpec) -> Result<String> {
    let plan = channel_plan(spec).map_err(Error::Validation)?;
    let params = count_spec_params(spec)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}: {} members, B = {}, {} classes, fusion {} ({}), input {}x{}x{}",
        spec.name,
        spec.member_count(),
        spec.block_count(),
        spec.num_classes,
        spec.fusion.as_str(),
        match spec.fuse_point {
            crate::netspec::FusePoint::BeforeRelu => "before relu",
            crate::netspec::FusePoint::AfterRelu => "after relu",
        },
        spec.input.channels,
        spec.input.height,
        spec.input.width,
    );
    let _ = writeln!(
        out,
        "params: {} ({:.2}M)\n",
        thousands(params.total),
        params.total as f64 / 1e6
    );

    let members: Vec<Vec<String>> = spec
        .members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let sizes: Vec<String> = m.block_sizes().iter().map(usize::to_string).collect();
            vec![
                format!("m{k}"),
                m.name.clone(),
                m.network.as_ref().map_or("-".into(), |n| n.name.clone()),
                sizes.join("/"),
                thousands(params.blocks[k].iter().sum()),
            ]
        })
        .collect();
    table(&mut out, &["member", "division", "network", "block sizes", "params"], &members);
    out.push('\n');

    let mut blocks = Vec::new();
    for b in 0..spec.block_count() {
        for (k, m) in spec.members.iter().enumerate() {
            let block = &m.resolved[b];
            let layers: Vec<&str> = block.layers.iter().map(|l| l.name.as_str()).collect();
            blocks.push(vec![
                format!("{}", b + 1),
                format!("m{k}"),
                if plan.stage_pool[b] { "yes".into() } else { "".into() },
                if layers.is_empty() { "identity".into() } else { layers.join(" ") },
                plan.member_out[k][b].to_string(),
                thousands(params.blocks[k][b]),
            ]);
        }
    }
    table(&mut out, &["stage", "member", "pool", "layers", "out", "params"], &blocks);
    out.push('\n');

    let mut layers = Vec::new();
    for (k, m) in spec.members.iter().enumerate() {
        for (b, block) in m.resolved.iter().enumerate() {
            let mut convs = plan.conv_channels[k][b].iter();
            for l in &block.layers {
                let (cin, cout) = if l.is_conv() {
                    *convs.next().expect("plan lists every convolution")
                } else {
                    (0, 0)
                };
                layers.push(vec![
                    format!("m{k}/b{}/{}", b + 1, l.name),
                    l.kind.as_str().to_string(),
                    if l.is_conv() { cin.to_string() } else { "".into() },
                    if l.is_conv() { cout.to_string() } else { "".into() },
                    if l.batchnorm { "bn".into() } else { "".into() },
                    if l.activation { "relu".into() } else { "".into() },
                ]);
            }
        }
    }
    let cin = plan.head_in();
    layers.push(vec!["head/fc1".into(), "conv1x1".into(), cin.to_string(), spec.fc_channels.to_string(), "bn".into(), "relu".into()]);
    layers.push(vec!["head/ip1".into(), "linear".into(), spec.fc_channels.to_string(), spec.num_classes.to_string(), "".into(), "".into()]);
    table(&mut out, &["layer", "kind", "in", "out", "norm", "act"], &layers);
    let _ = writeln!(out, "\nhead params: {}", thousands(params.head));
    Ok(out)
}

/// Plain-text rendering of an analysis report.
pub fn render_analysis(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}: K = {}, B = {}, params {}, groupings {} (bound {})\n",
        report.spec,
        report.members,
        report.blocks,
        thousands(report.params),
        report.grouping_count,
        report.grouping_bound
    );
    let rows: Vec<Vec<String>> = std::iter::once(vec![
        "0".into(),
        "".into(),
        report.paths.shortest_to_output[0].to_string(),
        "0".into(),
    ])
    .chain(report.stages.iter().map(|s| {
        vec![
            s.stage.to_string(),
            s.block_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join("/"),
            s.shortest_to_output.to_string(),
            s.shortest_from_input.to_string(),
        ]
    }))
    .collect();
    table(&mut out, &["stage", "|G| per member", "shortest to output", "shortest from input"], &rows);
    out.push('\n');
    let rf: Vec<Vec<String>> = report
        .receptive_fields
        .iter()
        .map(|m| {
            vec![
                m.name.clone(),
                m.depth.to_string(),
                m.receptive_field.size.to_string(),
                m.receptive_field.jump.to_string(),
            ]
        })
        .collect();
    table(&mut out, &["member", "depth", "receptive field", "jump"], &rf);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin_spec;

    #[test]
    fn n13n33_report() {
        let r = analyze(&builtin_spec("N13N33").unwrap()).unwrap();
        assert_eq!((r.members, r.blocks, r.grouping_count), (2, 3, 4));
        assert_eq!(r.params, 1_313_326);
        assert_eq!(r.stages[0].shortest_to_output, 2);
        assert_eq!(r.receptive_fields[0].receptive_field.size, 86);
        assert_eq!(r.receptive_fields[1].receptive_field.size, 18);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["grouping_count"], 4);
        assert_eq!(json["stages"][0]["stage"], 1);
        let text = render_analysis(&r);
        assert!(text.contains("groupings 4"));
    }

    #[test]
    fn describe_tables() {
        let text = describe(&builtin_spec("N13N33").unwrap()).unwrap();
        assert!(text.starts_with("N13N33: 2 members, B = 3, 10 classes"), "{text}");
        assert!(text.contains("1,313,326 (1.31M)"));
        assert!(text.contains("head/ip1"));
        assert_eq!(thousands(960), "960");
        assert_eq!(thousands(1_000), "1,000");
    }
}
