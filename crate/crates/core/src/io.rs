//! Text formats: fracture networks, meshes, run configuration, CSV tables
//! and legacy ASCII VTK.
//!
//! Fracture file:
//! ```text
//! FRACTURES <n>
//! x0 y0 x1 y1 thickness C|B k_value
//! ```
//! Mesh file:
//! ```text
//! VERTICES <n>
//! x y
//! CELLS <m>
//! i j k
//! BOUNDARY <b>        (optional)
//! i j D|N
//! FRACFACETS <f>      (optional)
//! i j fracture_id
//! ```
//! Blank lines and text after `#` are ignored in both.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BcKind, Fracture, FractureKind, Point};
use crate::mesh::{MeshBuilder, SimplicialMesh};

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), last: 0 }
    }

    /// Next non-empty line split into tokens.
    fn next_tokens(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let content = line.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if !tokens.is_empty() {
                self.last = i + 1;
                return Some((i + 1, tokens));
            }
        }
        None
    }

    fn expect_tokens(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        self.next_tokens().ok_or_else(|| Error::Parse { line: self.last + 1, message: format!("expected {what}") })
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, token: &str) -> Result<T> {
    token.parse().map_err(|_| Error::Parse { line, message: format!("invalid number `{token}`") })
}

fn header(lines: &mut Lines, keyword: &str) -> Result<usize> {
    let (line, tokens) = lines.expect_tokens(keyword)?;
    if tokens.len() != 2 || tokens[0] != keyword {
        return Err(Error::Parse { line, message: format!("expected `{keyword} <count>`") });
    }
    parse_num(line, tokens[1])
}

fn fields<'a>(lines: &mut Lines<'a>, count: usize, what: &str) -> Result<(usize, Vec<&'a str>)> {
    let (line, tokens) = lines.expect_tokens(what)?;
    if tokens.len() != count {
        return Err(Error::Parse { line, message: format!("expected {count} fields for {what}, found {}", tokens.len()) });
    }
    Ok((line, tokens))
}

pub fn parse_fractures(text: &str) -> Result<Vec<Fracture>> {
    let mut lines = Lines::new(text);
    let n = header(&mut lines, "FRACTURES")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, t) = fields(&mut lines, 7, "a fracture")?;
        let v: Vec<f64> = [0, 1, 2, 3, 4, 6].iter().map(|&i| parse_num(line, t[i])).collect::<Result<_>>()?;
        let kind = match t[5] {
            "C" => FractureKind::Conductive { tangential_conductivity: v[5] },
            "B" => FractureKind::Blocking { normal_conductivity: v[5] },
            other => return Err(Error::Parse { line, message: format!("fracture kind must be C or B, got `{other}`") }),
        };
        let f = Fracture::new(Point::new(v[0], v[1]), Point::new(v[2], v[3]), v[4], kind)
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        out.push(f);
    }
    if let Some((line, _)) = lines.next_tokens() {
        return Err(Error::Parse { line, message: "trailing content after the last fracture".into() });
    }
    Ok(out)
}

pub fn format_fractures(network: &[Fracture]) -> String {
    let mut s = format!("FRACTURES {}\n", network.len());
    for f in network {
        let (kind, k) = match f.kind {
            FractureKind::Conductive { tangential_conductivity } => ("C", tangential_conductivity),
            FractureKind::Blocking { normal_conductivity } => ("B", normal_conductivity),
        };
        let _ = writeln!(s, "{} {} {} {} {} {} {}", f.a.x, f.a.y, f.b.x, f.b.y, f.thickness, kind, k);
    }
    s
}

/// Parses a mesh; boundary facets without a tag are Neumann.
pub fn parse_mesh(text: &str) -> Result<SimplicialMesh> {
    let mut lines = Lines::new(text);
    let nv = header(&mut lines, "VERTICES")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, t) = fields(&mut lines, 2, "a vertex")?;
        vertices.push(Point::new(parse_num(line, t[0])?, parse_num(line, t[1])?));
    }
    let nc = header(&mut lines, "CELLS")?;
    let mut cells = Vec::with_capacity(nc);
    for _ in 0..nc {
        let (line, t) = fields(&mut lines, 3, "a cell")?;
        let cell = [parse_num(line, t[0])?, parse_num(line, t[1])?, parse_num(line, t[2])?];
        if cell.iter().any(|&v: &usize| v >= nv) {
            return Err(Error::Parse { line, message: "cell references a missing vertex".into() });
        }
        cells.push(cell);
    }
    let mut builder = MeshBuilder::new(vertices, cells);
    while let Some((line, t)) = lines.next_tokens() {
        if t.len() != 2 {
            return Err(Error::Parse { line, message: "expected a section header".into() });
        }
        let count: usize = parse_num(line, t[1])?;
        match t[0] {
            "BOUNDARY" => {
                for _ in 0..count {
                    let (line, t) = fields(&mut lines, 3, "a boundary facet")?;
                    let kind = match t[2] {
                        "D" => BcKind::Dirichlet,
                        "N" => BcKind::Neumann,
                        other => return Err(Error::Parse { line, message: format!("boundary tag must be D or N, got `{other}`") }),
                    };
                    builder.tag_boundary(parse_num(line, t[0])?, parse_num(line, t[1])?, kind);
                }
            }
            "FRACFACETS" => {
                for _ in 0..count {
                    let (line, t) = fields(&mut lines, 3, "a fracture facet")?;
                    builder.tag_fracture(parse_num(line, t[0])?, parse_num(line, t[1])?, parse_num(line, t[2])?);
                }
            }
            other => return Err(Error::Parse { line, message: format!("unknown section `{other}`") }),
        }
    }
    builder.build()
}

pub fn format_mesh(mesh: &SimplicialMesh) -> String {
    let mut s = format!("VERTICES {}\n", mesh.num_vertices());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {}", p.x, p.y);
    }
    let _ = writeln!(s, "CELLS {}", mesh.num_cells());
    for c in mesh.cells() {
        let _ = writeln!(s, "{} {} {}", c[0], c[1], c[2]);
    }
    let boundary: Vec<usize> = (0..mesh.num_facets()).filter(|&f| mesh.boundary_tag(f).is_some()).collect();
    let _ = writeln!(s, "BOUNDARY {}", boundary.len());
    for f in boundary {
        let [a, b] = mesh.facet(f);
        let tag = if mesh.boundary_tag(f) == Some(BcKind::Dirichlet) { "D" } else { "N" };
        let _ = writeln!(s, "{a} {b} {tag}");
    }
    let frac: Vec<usize> = (0..mesh.num_facets()).filter(|&f| mesh.fracture_tag(f).is_some()).collect();
    let _ = writeln!(s, "FRACFACETS {}", frac.len());
    for f in frac {
        let [a, b] = mesh.facet(f);
        let _ = writeln!(s, "{a} {b} {}", mesh.fracture_tag(f).unwrap());
    }
    s
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("file {} does not exist", path.display()))
        } else {
            Error::Io(e)
        }
    })
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
struct Num(f64);

impl std::fmt::Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a == 0.0 || !a.is_finite() || (1e-4..1e16).contains(&a) {
            write!(f, "{}", self.0)
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

/// `time,quantity,value` rows.
pub fn format_series(rows: &[(f64, String, f64)]) -> String {
    let mut s = String::from("time,quantity,value\n");
    for (t, q, v) in rows {
        let _ = writeln!(s, "{},{q},{}", Num(*t), Num(*v));
    }
    s
}

pub fn parse_series(text: &str) -> Result<Vec<(f64, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split(',').map(str::trim).collect();
        if t.len() != 3 {
            return Err(Error::Parse { line: i + 1, message: "expected time,quantity,value".into() });
        }
        out.push((parse_num(i + 1, t[0])?, t[1].to_string(), parse_num(i + 1, t[2])?));
    }
    Ok(out)
}

/// `s,x,y,value` rows of a line profile.
pub fn format_profile(rows: &[ProfileSample]) -> String {
    let mut s = String::from("s,x,y,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", Num(r.s), Num(r.point.x), Num(r.point.y), Num(r.value));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSample {
    /// Arc length from the start of the line.
    pub s: f64,
    pub point: Point,
    pub value: f64,
}

pub fn parse_profile(text: &str) -> Result<Vec<ProfileSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line.split(',').map(|t| parse_num(i + 1, t.trim())).collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Parse { line: i + 1, message: "expected s,x,y,value".into() });
        }
        out.push(ProfileSample { s: v[0], point: Point::new(v[1], v[2]), value: v[3] });
    }
    Ok(out)
}

/// Cell data written to and read from legacy VTK files.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct VtkFile {
    pub points: Vec<Point>,
    pub cells: Vec<[usize; 3]>,
    pub fields: Vec<(String, Vec<f64>)>,
}

pub fn format_vtk(mesh: &SimplicialMesh, fields: &[(&str, &[f64])]) -> String {
    let mut s = String::from("# vtk DataFile Version 3.0\nfrax\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {} 0", p.x, p.y);
    }
    let _ = writeln!(s, "CELLS {} {}", mesh.num_cells(), 4 * mesh.num_cells());
    for c in mesh.cells() {
        let _ = writeln!(s, "3 {} {} {}", c[0], c[1], c[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.num_cells());
    for _ in 0..mesh.num_cells() {
        s.push_str("5\n");
    }
    if !fields.is_empty() {
        let _ = writeln!(s, "CELL_DATA {}", mesh.num_cells());
        for (name, values) in fields {
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in values.iter() {
                let _ = writeln!(s, "{}", Num(*v));
            }
        }
    }
    s
}

pub fn parse_vtk(text: &str) -> Result<VtkFile> {
    let mut tokens = text.lines().enumerate().skip(4).flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)));
    let mut next = |what: &str| tokens.next().ok_or_else(|| Error::Parse { line: 0, message: format!("unexpected end, expected {what}") });
    let mut out = VtkFile::default();
    let mut ncells = 0;
    while let Ok((line, key)) = next("a section") {
        match key {
            "POINTS" => {
                let (l, n) = next("point count")?;
                let n: usize = parse_num(l, n)?;
                next("point type")?;
                for _ in 0..n {
                    let (l, x) = next("x")?;
                    let (_, y) = next("y")?;
                    next("z")?;
                    out.points.push(Point::new(parse_num(l, x)?, parse_num(l, y)?));
                }
            }
            "CELLS" => {
                let (l, n) = next("cell count")?;
                ncells = parse_num(l, n)?;
                next("cell list size")?;
                for _ in 0..ncells {
                    let (l, k) = next("cell size")?;
                    if k != "3" {
                        return Err(Error::Parse { line: l, message: "only triangles are supported".into() });
                    }
                    let mut c = [0; 3];
                    for v in &mut c {
                        let (l, t) = next("vertex index")?;
                        *v = parse_num(l, t)?;
                    }
                    out.cells.push(c);
                }
            }
            "CELL_TYPES" => {
                let (l, n) = next("cell count")?;
                let n: usize = parse_num(l, n)?;
                for _ in 0..n {
                    next("cell type")?;
                }
            }
            "CELL_DATA" => {
                next("cell count")?;
            }
            "SCALARS" => {
                let (_, name) = next("field name")?;
                next("field type")?;
                let (_, t) = next("LOOKUP_TABLE or components")?;
                if t != "LOOKUP_TABLE" {
                    next("LOOKUP_TABLE")?;
                }
                next("lookup table name")?;
                let mut values = Vec::with_capacity(ncells);
                for _ in 0..ncells {
                    let (l, v) = next("field value")?;
                    values.push(parse_num(l, v)?);
                }
                out.fields.push((name.to_string(), values));
            }
            other => return Err(Error::Parse { line, message: format!("unexpected `{other}`") }),
        }
    }
    Ok(out)
}

/// Flat `key = value` configuration with optional `[section]` headers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<(String, String), (usize, String)>,
    base_dir: PathBuf,
}

/// Keys accepted in each section; the empty section holds top-level keys.
const CONFIG_KEYS: &[(&str, &[&str])] = &[
    ("", &["benchmark", "level", "convergence"]),
    (
        "flow",
        &[
            "mesh",
            "fractures",
            "immerse",
            "nx",
            "ny",
            "domain",
            "boundary",
            "dirichlet",
            "neumann",
            "permeability",
            "source",
            "penalty",
            "solver",
            "cg_tol",
            "cg_max_iter",
        ],
    ),
    (
        "transport",
        &["porosity", "fracture_porosity", "initial", "inflow", "fracture_inflow", "dt", "final_time"],
    ),
    ("output", &["dir", "vtk", "profiles", "samples"]),
];

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut section = String::new();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !CONFIG_KEYS.iter().any(|(s, _)| *s == name) || name.is_empty() {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", i + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            let allowed = CONFIG_KEYS.iter().find(|(s, _)| *s == section).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key) {
                let place = if section.is_empty() { "top level".to_string() } else { format!("[{section}]") };
                return Err(Error::Config(format!("line {}: unknown key `{key}` in {place}", i + 1)));
            }
            if entries.insert((section.clone(), key.to_string()), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { entries, base_dir: base_dir.to_path_buf() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|(_, v)| v.as_str())
    }

    fn err(&self, section: &str, key: &str, msg: &str) -> Error {
        let line = self.entries.get(&(section.to_string(), key.to_string())).map_or(0, |e| e.0);
        Error::Config(format!("line {line}: `{key}` {msg}"))
    }

    pub fn number<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.get(section, key)
            .map(|v| v.parse().map_err(|_| self.err(section, key, "is not a valid number")))
            .transpose()
    }

    pub fn numbers(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(section, key)
            .map(|v| {
                v.split_whitespace()
                    .map(|t| t.parse().map_err(|_| self.err(section, key, "must be a list of numbers")))
                    .collect()
            })
            .transpose()
    }

    pub fn flag(&self, section: &str, key: &str) -> Result<Option<bool>> {
        self.get(section, key)
            .map(|v| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(self.err(section, key, "must be true or false")),
            })
            .transpose()
    }

    /// Path relative to the configuration file; must exist.
    pub fn path(&self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => {
                let p = self.base_dir.join(v);
                if p.exists() {
                    Ok(Some(p))
                } else {
                    Err(self.err(section, key, &format!("refers to missing file {}", p.display())))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fracture_round_trip() {
        let net = vec![
            Fracture::conductive(Point::new(0., 0.5), Point::new(1., 0.5), 1e-4, 1e4).unwrap(),
            Fracture::blocking(Point::new(0.5, 0.), Point::new(0.5, 1.), 1e-4, 1e-4).unwrap(),
        ];
        let text = format_fractures(&net);
        assert_eq!(parse_fractures(&text).unwrap(), net);
    }

    #[test]
    fn fracture_parse_errors() {
        assert!(matches!(parse_fractures("FRACTURES 1\n0 0 1 1 1 X 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_fractures("FRACTURES 2\n0 0 1 1 1 C 1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_fractures("FRACTURES 1\n0 0 0 0 1 C 1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn mesh_round_trip() {
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 2, 2).unwrap();
        let f = Fracture::conductive(Point::new(0., 0.5), Point::new(1., 0.5), 1e-4, 1e4).unwrap();
        mesh.tag_fracture_facets(0, &f, 1e-12);
        let text = format_mesh(&mesh);
        let back = parse_mesh(&text).unwrap();
        assert_eq!(format_mesh(&back), text);
        assert_eq!(back.num_cells(), 8);
    }

    #[test]
    fn untagged_boundary_defaults_to_neumann() {
        let mesh = parse_mesh("VERTICES 3\n0 0\n1 0\n0 1\nCELLS 1\n0 1 2\nBOUNDARY 1\n0 1 D\n").unwrap();
        let kinds: Vec<_> = (0..3).map(|f| mesh.boundary_tag(f).unwrap()).collect();
        assert_eq!(kinds.iter().filter(|k| **k == BcKind::Dirichlet).count(), 1);
        assert_eq!(kinds.iter().filter(|k| **k == BcKind::Neumann).count(), 2);
    }

    #[test]
    fn vtk_round_trip() {
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 1, 1).unwrap();
        let a = [1.0, 2.5];
        let b = [-3.0, 4.0];
        let text = format_vtk(&mesh, &[("p", &a), ("c", &b)]);
        assert!(text.contains("CELLS 2 8"));
        let back = parse_vtk(&text).unwrap();
        assert_eq!(back.cells.len(), 2);
        assert_eq!(back.points.len(), 4);
        assert_eq!(back.fields, vec![("p".to_string(), a.to_vec()), ("c".to_string(), b.to_vec())]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = Path::new(".");
        assert!(Config::parse("[flow]\npenalty = 1e6\n", dir).is_ok());
        assert!(matches!(Config::parse("[flow]\npenalti = 1\n", dir), Err(Error::Config(_))));
        assert!(matches!(Config::parse("[nope]\n", dir), Err(Error::Config(_))));
        assert!(matches!(Config::parse("level = 1\nlevel = 2\n", dir), Err(Error::Config(_))));
        let c = Config::parse("level = 2\n[transport]\ndt = 0.5\n", dir).unwrap();
        assert_eq!(c.number::<usize>("", "level").unwrap(), Some(2));
        assert_eq!(c.number::<f64>("transport", "dt").unwrap(), Some(0.5));
        assert!(c.number::<f64>("transport", "final_time").unwrap().is_none());
    }

    #[test]
    fn profile_round_trip() {
        let rows = vec![ProfileSample { s: 0.0, point: Point::new(0.0, 0.7), value: 1.25 }];
        assert_eq!(parse_profile(&format_profile(&rows)).unwrap(), rows);
    }

    #[test]
    fn series_round_trip() {
        let rows = vec![(0.0, "tiny".to_string(), 4.5e-18), (0.1, "mass".to_string(), -2.5), (1e20, "big".to_string(), 0.0)];
        let text = format_series(&rows);
        assert!(text.contains("4.5e-18") && text.contains("1e20"));
        assert_eq!(parse_series(&text).unwrap(), rows);
    }
}
