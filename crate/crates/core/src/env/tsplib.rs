//! TSPLib / CVRPLib readers (EUC_2D only) and the best-known-solution table.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::{EnvError, EnvId, InstanceBatch};

/// A parsed benchmark file, scaled into the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedInstance {
    pub name: String,
    /// Batch of one.
    pub instance: InstanceBatch,
    /// Multiply unit-square costs by this to get back to file units.
    pub scale: f64,
    /// Minimum x and y of the original coordinates.
    pub offset: [f64; 2],
    /// Original coordinates, depot first for CVRP.
    pub raw_coords: Vec<[f64; 2]>,
    pub capacity: Option<f64>,
}

impl ParsedInstance {
    /// Cost in the file's units.
    pub fn rescale(&self, unit_cost: f64) -> f64 {
        unit_cost * self.scale
    }

    /// Best-known solution value, when tabulated.
    pub fn bks(&self) -> Option<f64> {
        best_known(&self.name)
    }

    /// TSPLib EUC_2D distance (rounded to the nearest integer) between nodes.
    pub fn nint_distance(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.raw_coords[i], self.raw_coords[j]);
        ((p[0] - q[0]).hypot(p[1] - q[1])).round()
    }
}

#[derive(Default)]
struct Sections {
    header: HashMap<String, String>,
    coords: Vec<(usize, [f64; 2])>,
    demands: Vec<(usize, f64)>,
    depots: Vec<usize>,
}

const KEYWORDS: [&str; 10] = [
    "NAME",
    "TYPE",
    "COMMENT",
    "DIMENSION",
    "EDGE_WEIGHT_TYPE",
    "CAPACITY",
    "NODE_COORD_TYPE",
    "DISPLAY_DATA_TYPE",
    "EDGE_WEIGHT_FORMAT",
    "VEHICLES",
];

fn parse_sections(text: &str) -> Result<Sections, EnvError> {
    #[derive(PartialEq)]
    enum Mode {
        Header,
        Coords,
        Demand,
        Depot,
        Skip,
    }
    let malformed = |m: String| EnvError::MalformedSection(m);
    let mut s = Sections::default();
    let mut mode = Mode::Header;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            break;
        }
        let first = line.split(|c: char| c.is_whitespace() || c == ':').next().unwrap_or("");
        if first.ends_with("_SECTION") {
            mode = match first {
                "NODE_COORD_SECTION" => Mode::Coords,
                "DEMAND_SECTION" => Mode::Demand,
                "DEPOT_SECTION" => Mode::Depot,
                _ => Mode::Skip,
            };
            continue;
        }
        if KEYWORDS.contains(&first) {
            let value = line[first.len()..].trim_start().trim_start_matches(':').trim();
            s.header.insert(first.to_string(), value.to_string());
            mode = Mode::Header;
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let num = |k: usize| -> Result<f64, EnvError> {
            nums.get(k)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| malformed(format!("line {}: expected a number in {line:?}", lineno + 1)))
        };
        match mode {
            Mode::Coords => s.coords.push((num(0)? as usize, [num(1)?, num(2)?])),
            Mode::Demand => s.demands.push((num(0)? as usize, num(1)?)),
            Mode::Depot => {
                let id = num(0)?;
                if id >= 0.0 {
                    s.depots.push(id as usize);
                }
            }
            Mode::Skip => {}
            Mode::Header => {
                if let Some((k, v)) = line.split_once(':') {
                    s.header.insert(k.trim().to_string(), v.trim().to_string());
                } else {
                    return Err(malformed(format!("line {}: unexpected {line:?}", lineno + 1)));
                }
            }
        }
    }
    Ok(s)
}

fn common(s: &Sections) -> Result<(String, usize), EnvError> {
    let malformed = |m: &str| EnvError::MalformedSection(m.to_string());
    let ewt = s.header.get("EDGE_WEIGHT_TYPE").map(String::as_str).unwrap_or("");
    if ewt != "EUC_2D" {
        return Err(EnvError::UnsupportedEdgeWeightType(ewt.to_string()));
    }
    let name = s.header.get("NAME").cloned().unwrap_or_default();
    let dim: usize = s
        .header
        .get("DIMENSION")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| malformed("missing or invalid DIMENSION"))?;
    if s.coords.len() != dim {
        return Err(EnvError::MalformedSection(format!(
            "NODE_COORD_SECTION has {} entries, DIMENSION is {dim}",
            s.coords.len()
        )));
    }
    let mut ids: Vec<usize> = s.coords.iter().map(|c| c.0).collect();
    ids.sort_unstable();
    if ids != (1..=dim).collect::<Vec<_>>() {
        return Err(malformed("node ids must be 1..=DIMENSION"));
    }
    Ok((name, dim))
}

/// Min-max scaling by one shared factor, so distances scale uniformly.
fn scale_coords(raw: &[[f64; 2]]) -> (Vec<f32>, f64, [f64; 2]) {
    let min = |k: usize| raw.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
    let max = |k: usize| raw.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
    let offset = [min(0), min(1)];
    let extent = (max(0) - offset[0]).max(max(1) - offset[1]);
    let scale = if extent > 0.0 { extent } else { 1.0 };
    let locs =
        raw.iter().flat_map(|p| [((p[0] - offset[0]) / scale) as f32, ((p[1] - offset[1]) / scale) as f32]).collect();
    (locs, scale, offset)
}

pub fn parse_tsplib(text: &str) -> Result<ParsedInstance, EnvError> {
    let s = parse_sections(text)?;
    let (name, dim) = common(&s)?;
    let mut coords = s.coords.clone();
    coords.sort_by_key(|c| c.0);
    let raw: Vec<[f64; 2]> = coords.into_iter().map(|c| c.1).collect();
    let (locs, scale, offset) = scale_coords(&raw);
    Ok(ParsedInstance {
        name,
        instance: InstanceBatch::from_locs(EnvId::Tsp, 1, dim, locs),
        scale,
        offset,
        raw_coords: raw,
        capacity: None,
    })
}

pub fn parse_cvrplib(text: &str) -> Result<ParsedInstance, EnvError> {
    let s = parse_sections(text)?;
    let (name, dim) = common(&s)?;
    let capacity: f64 = s
        .header
        .get("CAPACITY")
        .and_then(|c| c.parse().ok())
        .filter(|&c: &f64| c > 0.0)
        .ok_or_else(|| EnvError::MalformedSection("missing or invalid CAPACITY".into()))?;
    if s.demands.len() != dim {
        return Err(EnvError::MalformedSection(format!(
            "DEMAND_SECTION has {} entries, expected {dim}",
            s.demands.len()
        )));
    }
    let depot = match s.depots.as_slice() {
        [d] if (1..=dim).contains(d) => *d,
        [] => 1,
        _ => return Err(EnvError::MalformedSection("expected exactly one depot".into())),
    };
    let mut coords = s.coords.clone();
    coords.sort_by_key(|c| c.0);
    let mut demand_by_id = vec![f64::NAN; dim + 1];
    for &(id, d) in &s.demands {
        if id == 0 || id > dim {
            return Err(EnvError::MalformedSection(format!("demand for unknown node {id}")));
        }
        demand_by_id[id] = d;
    }
    let order: Vec<usize> = std::iter::once(depot).chain((1..=dim).filter(|&i| i != depot)).collect();
    let raw: Vec<[f64; 2]> = order.iter().map(|&id| coords[id - 1].1).collect();
    let (locs, scale, offset) = scale_coords(&raw);
    let mut instance = InstanceBatch::from_locs(EnvId::Cvrp, 1, dim, locs);
    instance.demand = order
        .iter()
        .enumerate()
        .map(|(k, &id)| if k == 0 { 0.0 } else { (demand_by_id[id] / capacity) as f32 })
        .collect();
    instance.validate()?;
    Ok(ParsedInstance { name, instance, scale, offset, raw_coords: raw, capacity: Some(capacity) })
}

fn table() -> &'static HashMap<String, f64> {
    static TABLE: OnceLock<HashMap<String, f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut reader = csv::Reader::from_reader(include_str!("../../data/bks.csv").as_bytes());
        reader
            .records()
            .map(|r| {
                let r = r.expect("bundled BKS table");
                (r[0].to_string(), r[1].parse().expect("bundled BKS value"))
            })
            .collect()
    })
}

/// Best-known solution value of a named TSPLib/CVRPLib instance.
pub fn best_known(name: &str) -> Option<f64> {
    table().get(name).copied()
}
