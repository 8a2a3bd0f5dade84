use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    builtin_division, builtin_network, builtin_spec, BlockRange, FusePoint, FusedNetSpec,
    FusionKind, InputShape, LayerName, MemberSpec, NetworkSpec, StageKind, StageSpec,
};
use crate::error::{Error, Result};

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fusion: Option<FusionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fuse_point: Option<FusePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fc_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    members: Option<Vec<MemberDoc>>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct MemberDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    network: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    division: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<Value>>,
}

/// Byte offsets of the elements of the top-level `members` array.
fn member_offsets(doc: &str) -> Vec<usize> {
    let bytes = doc.as_bytes();
    let Some(key) = doc.find("\"members\"") else {
        return Vec::new();
    };
    let Some(open) = doc[key..].find('[').map(|i| key + i) else {
        return Vec::new();
    };
    let mut offsets = Vec::new();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut expect_element = true;
    for (i, &b) in bytes.iter().enumerate().skip(open + 1) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b' ' | b'\n' | b'\r' | b'\t' => continue,
            _ if depth == 0 && expect_element && b != b']' => {
                offsets.push(i);
                expect_element = false;
            }
            _ => {}
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' => depth = depth.saturating_sub(1),
            b']' if depth == 0 => break,
            b']' => depth -= 1,
            b',' if depth == 0 => expect_element = true,
            _ => {}
        }
    }
    offsets
}

fn line_col(doc: &str, offset: usize) -> (usize, usize) {
    let before = &doc[..offset.min(doc.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

struct Locator<'a> {
    doc: &'a str,
    members: Vec<usize>,
}

impl Locator<'_> {
    fn error(&self, member: Option<usize>, field: &str, message: String) -> Error {
        let (start, end) = match member {
            Some(k) => (
                self.members.get(k).copied().unwrap_or(0),
                self.members.get(k + 1).copied().unwrap_or(self.doc.len()),
            ),
            None => (0, self.doc.len()),
        };
        let key = field.rsplit('.').next().unwrap_or(field);
        let key = key.split('[').next().unwrap_or(key);
        let pos = self.doc[start..end]
            .find(&format!("\"{key}\""))
            .map(|i| start + i)
            .or(member.and(Some(start)).filter(|_| !self.members.is_empty()));
        let (line, column) = match pos {
            Some(p) => {
                let (l, c) = line_col(self.doc, p);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        Error::Parse {
            line,
            column,
            field: field.to_string(),
            message,
        }
    }
}

fn parse_stage(v: &Value) -> Result<StageSpec, String> {
    let items = v
        .as_array()
        .ok_or_else(|| format!("stage must be an array [kind, channels, repeat], got {v}"))?;
    let kind: StageKind = items
        .first()
        .and_then(Value::as_str)
        .ok_or_else(|| format!("stage {v} must start with a layer kind"))?
        .parse()?;
    let num = |i: usize, what: &str| -> Result<Option<usize>, String> {
        match items.get(i) {
            None => Ok(None),
            Some(x) => x
                .as_u64()
                .map(|n| Some(n as usize))
                .ok_or_else(|| format!("{what} in stage {v} must be a non-negative integer")),
        }
    };
    if kind == StageKind::MaxPool2 {
        if items.len() > 1 {
            return Err(format!("pool stage {v} takes no arguments"));
        }
        return Ok(StageSpec::pool());
    }
    if !(3..=4).contains(&items.len()) {
        return Err(format!(
            "stage {v} must be [kind, channels, repeat] or [kind, channels, repeat, in_channels]"
        ));
    }
    let channels = num(1, "channels")?.expect("length checked");
    let repeat = num(2, "repeat")?.expect("length checked");
    if channels == 0 || repeat == 0 {
        return Err(format!("stage {v}: channels and repeat must be positive"));
    }
    Ok(StageSpec {
        kind,
        channels,
        repeat,
        in_channels: num(3, "in_channels")?,
    })
}

fn parse_block(v: &Value) -> Result<BlockRange, String> {
    match v {
        Value::String(s) if s == "identity" => Ok(BlockRange::Identity),
        Value::Object(map) => match (map.get("project").and_then(Value::as_u64), map.len()) {
            (Some(c), 1) if c > 0 => Ok(BlockRange::Projection {
                out_channels: c as usize,
            }),
            _ => Err(format!("malformed block {v} (expected {{\"project\": <channels>}})")),
        },
        Value::Array(items) if (1..=2).contains(&items.len()) => {
            let name = |x: &Value| -> Result<LayerName, String> {
                x.as_str()
                    .ok_or_else(|| format!("malformed range {v}: entries must be layer names"))?
                    .parse()
            };
            let first = name(&items[0])?;
            let last = items.get(1).map(name).transpose()?.unwrap_or(first);
            Ok(BlockRange::range(first, last))
        }
        _ => Err(format!(
            "malformed range {v} (expected [\"C11\", \"C15\"], \"identity\" or {{\"project\": c}})"
        )),
    }
}

fn parse_member(doc: &MemberDoc, k: usize, loc: &Locator<'_>) -> Result<MemberSpec> {
    let field = |f: &str| format!("members[{k}].{f}");
    let division = match &doc.division {
        Some(d) => Some(builtin_division(d).ok_or_else(|| {
            loc.error(Some(k), &field("division"), format!("unknown division {d:?}"))
        })?),
        None => None,
    };
    let network_name = doc
        .network
        .clone()
        .or_else(|| division.as_ref().map(|d| d.network.clone()));
    let network = match network_name.as_deref() {
        Some("inline") => {
            let stages = doc.stages.as_ref().ok_or_else(|| {
                loc.error(
                    Some(k),
                    &field("stages"),
                    "inline network needs a stages list".into(),
                )
            })?;
            let stages = stages
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    parse_stage(s).map_err(|m| loc.error(Some(k), &field(&format!("stages[{i}]")), m))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(NetworkSpec {
                name: doc.name.clone().unwrap_or_else(|| format!("member{k}")),
                stages,
                fc_channels: 100,
                num_classes: 10,
                declared_layers: None,
            })
        }
        Some(name) => {
            if doc.stages.is_some() {
                return Err(loc.error(
                    Some(k),
                    &field("stages"),
                    format!("stages are only allowed with \"network\": \"inline\", not {name:?}"),
                ));
            }
            Some(builtin_network(name).ok_or_else(|| {
                loc.error(Some(k), &field("network"), format!("unknown network name {name:?}"))
            })?)
        }
        None => None,
    };
    if let (Some(d), Some(n)) = (&division, &network) {
        if d.network != n.name {
            return Err(loc.error(
                Some(k),
                &field("division"),
                format!("division {} divides {}, not {}", d.name, d.network, n.name),
            ));
        }
    }
    let blocks = match (&doc.blocks, &division) {
        (Some(_), Some(_)) => {
            return Err(loc.error(
                Some(k),
                &field("blocks"),
                "give either blocks or a division, not both".into(),
            ))
        }
        (Some(list), None) => list
            .iter()
            .enumerate()
            .map(|(i, b)| {
                parse_block(b).map_err(|m| loc.error(Some(k), &field(&format!("blocks[{i}]")), m))
            })
            .collect::<Result<Vec<_>>>()?,
        (None, Some(d)) => d.blocks.clone(),
        (None, None) => match &network {
            Some(n) => {
                let (first, last) = n.conv_bounds().ok_or_else(|| {
                    loc.error(Some(k), &field("stages"), "network has no convolutions".into())
                })?;
                vec![BlockRange::range(first, last)]
            }
            None => {
                return Err(loc.error(
                    Some(k),
                    &field("network"),
                    "member needs a network, a division or blocks".into(),
                ))
            }
        },
    };
    let name = doc
        .name
        .clone()
        .or_else(|| division.as_ref().map(|d| d.name.clone()))
        .or_else(|| network_name.filter(|n| n != "inline"))
        .unwrap_or_else(|| format!("member{k}"));
    MemberSpec::resolve(name, network, blocks).map_err(|m| loc.error(Some(k), &field("blocks"), m))
}

/// Parse a JSON fused-net config into a resolved spec.
///
/// The document either lists `members` or names a `builtin` fused net; the
/// top-level `fusion`, `fuse_point`, `classes`, `fc_channels` and `input`
/// fields override the defaults in both cases.
pub fn parse_spec(document: &str) -> Result<FusedNetSpec> {
    let doc: Doc = serde_json::from_str(document).map_err(|e| Error::Parse {
        line: Some(e.line()),
        column: Some(e.column()),
        field: "document".into(),
        message: e.to_string(),
    })?;
    let loc = Locator {
        doc: document,
        members: member_offsets(document),
    };
    let mut spec = match (&doc.builtin, &doc.members) {
        (Some(_), Some(_)) => {
            return Err(loc.error(None, "builtin", "give either builtin or members, not both".into()))
        }
        (Some(name), None) => {
            builtin_spec(name).map_err(|m| loc.error(None, "builtin", m))?
        }
        (None, None) => {
            return Err(loc.error(None, "members", "at least one base network is required".into()))
        }
        (None, Some(list)) => {
            if list.is_empty() {
                return Err(loc.error(
                    None,
                    "members",
                    "at least one base network is required".into(),
                ));
            }
            let members = list
                .iter()
                .enumerate()
                .map(|(k, m)| parse_member(m, k, &loc))
                .collect::<Result<Vec<_>>>()?;
            if let Some(k) = members.iter().position(|m| m.block_count() != members[0].block_count()) {
                return Err(loc.error(
                    Some(k),
                    &format!("members[{k}].blocks"),
                    format!(
                        "block-count mismatch: {} has {} blocks but {} has {}",
                        members[0].name,
                        members[0].block_count(),
                        members[k].name,
                        members[k].block_count()
                    ),
                ));
            }
            let name = members.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().concat();
            FusedNetSpec::new(name, members, 10)
        }
    };
    if let Some(name) = doc.name {
        spec.name = name;
    }
    if let Some(f) = doc.fusion {
        spec.fusion = f;
    }
    if let Some(p) = doc.fuse_point {
        spec.fuse_point = p;
    }
    if let Some(c) = doc.classes {
        spec = spec.with_classes(c);
    }
    if let Some(fc) = doc.fc_channels {
        spec.fc_channels = fc;
        for m in &mut spec.members {
            if let Some(n) = &mut m.network {
                n.fc_channels = fc;
            }
        }
    }
    if let Some([channels, height, width]) = doc.input {
        spec.input = InputShape {
            channels,
            height,
            width,
        };
    }
    Ok(spec)
}

fn block_value(b: &BlockRange) -> Value {
    match b {
        BlockRange::Layers { first, last } => json!([first.to_string(), last.to_string()]),
        BlockRange::Identity => json!("identity"),
        BlockRange::Projection { out_channels } => json!({ "project": out_channels }),
    }
}

fn stage_value(s: &StageSpec) -> Value {
    match (s.kind, s.in_channels) {
        (StageKind::MaxPool2, _) => json!([s.kind.as_str()]),
        (_, None) => json!([s.kind.as_str(), s.channels, s.repeat]),
        (_, Some(i)) => json!([s.kind.as_str(), s.channels, s.repeat, i]),
    }
}

/// Emit `spec` as a self-contained config document (all networks inline).
pub fn serialize_spec(spec: &FusedNetSpec) -> String {
    let members = spec
        .members
        .iter()
        .map(|m| MemberDoc {
            name: Some(m.name.clone()),
            network: m.network.as_ref().map(|_| "inline".to_string()),
            division: None,
            stages: m
                .network
                .as_ref()
                .map(|n| n.stages.iter().map(stage_value).collect()),
            blocks: Some(m.blocks.iter().map(block_value).collect()),
        })
        .collect();
    let doc = Doc {
        name: Some(spec.name.clone()),
        builtin: None,
        fusion: Some(spec.fusion),
        fuse_point: Some(spec.fuse_point),
        classes: Some(spec.num_classes),
        fc_channels: Some(spec.fc_channels),
        input: Some([spec.input.channels, spec.input.height, spec.input.width]),
        members: Some(members),
    };
    serde_json::to_string_pretty(&doc).expect("config documents always serialize")
}

/// Resolve a CLI spec argument: a path to a JSON config, or a builtin name.
pub fn load_spec(arg: &str) -> Result<FusedNetSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_spec(&text);
    }
    builtin_spec(arg).map_err(|message| Error::Parse {
        line: None,
        column: None,
        field: "spec".into(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_document() {
        let spec = parse_spec(r#"{"builtin": "N13N33", "classes": 100}"#).unwrap();
        assert_eq!(spec.member_count(), 2);
        assert_eq!(spec.block_count(), 3);
        assert_eq!(spec.num_classes, 100);
    }

    #[test]
    fn explicit_members() {
        let doc = r#"{
  "fusion": "sum",
  "fuse_point": "before_relu",
  "classes": 10,
  "members": [
    {"network": "N1", "blocks": [["C11","C15"], ["C21","C26"], ["C31","C36"]]},
    {"division": "N33"}
  ]
}"#;
        let spec = parse_spec(doc).unwrap();
        assert!(spec.structurally_eq(&builtin_spec("N13N33").unwrap()));
    }

    #[test]
    fn empty_members_are_rejected() {
        let err = parse_spec(r#"{"members": []}"#).unwrap_err().to_string();
        assert!(err.contains("at least one base network"), "{err}");
    }

    #[test]
    fn block_count_mismatch_names_both_divisions() {
        let doc = "{\"members\": [\n  {\"division\": \"N13\"},\n  {\"division\": \"N16\"}\n]}";
        let err = parse_spec(doc).unwrap_err();
        let Error::Parse { line, message, .. } = &err else { panic!("{err}") };
        assert!(message.contains("N13") && message.contains("N16"), "{message}");
        assert_eq!(*line, Some(3));
    }

    #[test]
    fn unknown_network_is_positioned() {
        let doc = "{\n\"members\": [\n {\"network\": \"N9\"}\n]}";
        let err = parse_spec(doc).unwrap_err();
        let Error::Parse { line, field, message, .. } = &err else { panic!("{err}") };
        assert_eq!(*line, Some(3));
        assert_eq!(field, "members[0].network");
        assert!(message.contains("N9"));
    }

    #[test]
    fn malformed_range_and_syntax_errors() {
        let doc = r#"{"members": [{"network": "N3", "blocks": [["C11", "Cx"]]}]}"#;
        let err = parse_spec(doc).unwrap_err().to_string();
        assert!(err.contains("malformed layer name"), "{err}");
        let err = parse_spec("{\"members\": [\n}").unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(2), .. }), "{err}");
        assert!(parse_spec(r#"{"membres": []}"#).is_err());
    }

    #[test]
    fn builtins_round_trip() {
        for name in ["N13N33", "N16N46", "N18N58", "resnet19", "tiny", "N13N33-concat", "N1"] {
            let spec = builtin_spec(name).unwrap();
            let back = parse_spec(&serialize_spec(&spec)).unwrap();
            assert!(spec.structurally_eq(&back), "{name}");
            assert_eq!(back.name, spec.name);
        }
    }

    fn arb_spec() -> impl Strategy<Value = FusedNetSpec> {
        let member = (prop::collection::vec((1usize..4, 1usize..48), 3), any::<bool>());
        (
            prop::collection::vec(member, 1..4),
            prop::sample::select(vec![FusionKind::Sum, FusionKind::Max, FusionKind::Concat]),
            any::<bool>(),
            prop::sample::select(vec![10usize, 100]),
        )
            .prop_map(|(members, fusion, after, classes)| {
                let members = members
                    .into_iter()
                    .enumerate()
                    .map(|(k, (stages, one_block))| {
                        let mut list = Vec::new();
                        for (s, &(repeat, channels)) in stages.iter().enumerate() {
                            if s > 0 {
                                list.push(StageSpec::pool());
                            }
                            list.push(StageSpec::conv3(channels, repeat));
                        }
                        let net = NetworkSpec {
                            name: format!("m{k}"),
                            stages: list,
                            fc_channels: 100,
                            num_classes: 10,
                            declared_layers: None,
                        };
                        let (first, last) = net.conv_bounds().unwrap();
                        let blocks = if one_block {
                            vec![BlockRange::range(first, last)]
                        } else {
                            (0..3u8)
                                .map(|s| {
                                    BlockRange::range(
                                        LayerName::new(s + 1, 1),
                                        LayerName::new(s + 1, stages[s as usize].0 as u16),
                                    )
                                })
                                .collect()
                        };
                        MemberSpec::resolve(format!("m{k}"), Some(net), blocks).unwrap()
                    })
                    .collect();
                FusedNetSpec::new("arb", members, 10)
                    .with_fusion(fusion)
                    .with_fuse_point(if after { FusePoint::AfterRelu } else { FusePoint::BeforeRelu })
                    .with_classes(classes)
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(spec in arb_spec()) {
            let text = serialize_spec(&spec);
            let back = parse_spec(&text);
            if spec.members.iter().all(|m| m.block_count() == spec.members[0].block_count()) {
                let back = back.unwrap();
                prop_assert!(spec.structurally_eq(&back));
                prop_assert_eq!(serialize_spec(&back), text);
            } else {
                prop_assert!(back.is_err());
            }
        }
    }
}
