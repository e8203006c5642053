//! Annotated point clouds, the `OF3D-SCENE` text format, a synthetic room
//! generator and geometric augmentation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const SCENE_HEADER_V1: &str = "OF3D-SCENE v1";
pub const SCENE_HEADER_V1_1: &str = "OF3D-SCENE v1.1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub is_thing: bool,
}

/// Ordered semantic categories with a thing/stuff flag each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
}

impl ClassCatalog {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &classes {
            if c.name.is_empty() || c.name.chars().any(char::is_whitespace) {
                return Err(Error::Invariant(format!("invalid class name {:?}", c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Invariant(format!("duplicate class name `{}`", c.name)));
            }
        }
        Ok(Self { classes })
    }

    pub fn from_pairs(pairs: &[(&str, bool)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(n, t)| ClassInfo {
                    name: n.to_string(),
                    is_thing: t,
                })
                .collect(),
        )
    }

    /// Three stuff classes followed by four furniture thing classes.
    pub fn indoor() -> Self {
        Self::from_pairs(&[
            ("floor", false),
            ("wall", false),
            ("ceiling", false),
            ("chair", true),
            ("table", true),
            ("sofa", true),
            ("bookcase", true),
        ])
        .expect("static catalog")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn name(&self, id: usize) -> &str {
        &self.classes[id].name
    }

    pub fn is_thing(&self, id: usize) -> bool {
        self.classes.get(id).is_some_and(|c| c.is_thing)
    }

    /// Semantic ids of thing classes in catalog order.
    pub fn thing_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i].is_thing).collect()
    }

    pub fn stuff_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.classes[i].is_thing).collect()
    }

    /// Position of a semantic id among thing classes (the class-head column).
    pub fn thing_index(&self, semantic: usize) -> Option<usize> {
        self.thing_ids().iter().position(|&t| t == semantic)
    }
}

/// A labeled point cloud. Rows of `points` are `x y z r g b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 6]>,
    pub instance_id: Vec<i32>,
    pub semantic_id: Vec<i32>,
    pub catalog: ClassCatalog,
    /// Precomputed partition labels from a `v1.1` file.
    pub segment_id: Option<Vec<usize>>,
}

impl Scene {
    pub fn new(
        points: Vec<[f64; 6]>,
        instance_id: Vec<i32>,
        semantic_id: Vec<i32>,
        catalog: ClassCatalog,
    ) -> Result<Self> {
        let s = Self {
            points,
            instance_id,
            semantic_id,
            catalog,
            segment_id: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = &self.points[i];
        [p[0], p[1], p[2]]
    }

    /// Checks every scene invariant; nothing is repaired.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::Invariant("scene has no points".into()));
        }
        if self.instance_id.len() != n || self.semantic_id.len() != n {
            return Err(Error::Invariant(format!(
                "label lengths {}/{} differ from point count {n}",
                self.instance_id.len(),
                self.semantic_id.len()
            )));
        }
        if let Some(seg) = &self.segment_id {
            if seg.len() != n {
                return Err(Error::Invariant("segment_id length differs from point count".into()));
            }
        }
        let k = self.catalog.len() as i32;
        let mut inst_sem: BTreeMap<i32, i32> = BTreeMap::new();
        for i in 0..n {
            let p = &self.points[i];
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("point {i} has non-finite values")));
            }
            if p[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invariant(format!("point {i} color outside [0,1]")));
            }
            let (inst, sem) = (self.instance_id[i], self.semantic_id[i]);
            if sem < -1 || sem >= k {
                return Err(Error::Invariant(format!("point {i} semantic id {sem} out of range")));
            }
            if inst < -1 {
                return Err(Error::Invariant(format!("point {i} instance id {inst} invalid")));
            }
            if inst >= 0 {
                if sem < 0 || !self.catalog.is_thing(sem as usize) {
                    return Err(Error::Invariant(format!(
                        "point {i} of instance {inst} has non-thing semantic id {sem}"
                    )));
                }
                match inst_sem.get(&inst) {
                    Some(&s) if s != sem => {
                        return Err(Error::Invariant(format!(
                            "instance {inst} carries semantic ids {s} and {sem}"
                        )))
                    }
                    _ => {
                        inst_sem.insert(inst, sem);
                    }
                }
            }
        }
        Ok(())
    }

    /// Distinct instance ids in ascending order.
    pub fn instance_ids(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.instance_id.iter().copied().filter(|&i| i >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn to_text(&self) -> Result<String> {
        if self.catalog.is_empty() {
            return Err(Error::Contract("cannot save a scene with an empty class catalog".into()));
        }
        self.validate()?;
        let mut s = String::new();
        let header = if self.segment_id.is_some() {
            SCENE_HEADER_V1_1
        } else {
            SCENE_HEADER_V1
        };
        writeln!(s, "{header}").unwrap();
        writeln!(s, "classes {}", self.catalog.len()).unwrap();
        for c in self.catalog.classes() {
            writeln!(s, "{} {}", c.name, if c.is_thing { "thing" } else { "stuff" }).unwrap();
        }
        writeln!(s, "points {}", self.len()).unwrap();
        for i in 0..self.len() {
            let p = &self.points[i];
            write!(
                s,
                "{} {} {} {} {} {} {} {}",
                p[0], p[1], p[2], p[3], p[4], p[5], self.instance_id[i], self.semantic_id[i]
            )
            .unwrap();
            if let Some(seg) = &self.segment_id {
                write!(s, " {}", seg[i]).unwrap();
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .filter(|(_, l)| !l.is_empty())
                .ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected {what}")))
        };
        let (_, header) = next("header")?;
        let with_segments = match header {
            SCENE_HEADER_V1 => false,
            SCENE_HEADER_V1_1 => true,
            other => return Err(Error::parse(1, format!("unknown header `{other}`"))),
        };
        let count = |(ln, line): (usize, &str), key: &str| -> Result<usize> {
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(k), Some(v), None) if k == key => {
                    v.parse().map_err(|_| Error::parse(ln, format!("bad {key} count `{v}`")))
                }
                _ => Err(Error::parse(ln, format!("expected `{key} <count>`"))),
            }
        };
        let k = count(next("classes line")?, "classes")?;
        let mut classes = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, line) = next("class line")?;
            let mut it = line.split(' ');
            let (name, kind) = match (it.next(), it.next(), it.next()) {
                (Some(n), Some(t), None) => (n, t),
                _ => return Err(Error::parse(ln, "expected `<name> <thing|stuff>`")),
            };
            let is_thing = match kind {
                "thing" => true,
                "stuff" => false,
                _ => return Err(Error::parse(ln, format!("bad class kind `{kind}`"))),
            };
            classes.push(ClassInfo {
                name: name.to_string(),
                is_thing,
            });
        }
        let catalog = ClassCatalog::new(classes).map_err(|e| Error::parse(3, e.to_string()))?;
        let (pts_ln, pts_line) = next("points line")?;
        let n = count((pts_ln, pts_line), "points")?;
        let cols = if with_segments { 9 } else { 8 };
        let mut points = Vec::with_capacity(n);
        let mut inst = Vec::with_capacity(n);
        let mut sem = Vec::with_capacity(n);
        let mut seg = Vec::with_capacity(if with_segments { n } else { 0 });
        for _ in 0..n {
            let (ln, line) = next("point line")?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != cols {
                return Err(Error::parse(ln, format!("expected {cols} columns, got {}", fields.len())));
            }
            let mut p = [0.0; 6];
            for (slot, f) in p.iter_mut().zip(&fields[..6]) {
                *slot = f
                    .parse()
                    .map_err(|_| Error::parse(ln, format!("bad float `{f}`")))?;
            }
            points.push(p);
            let int = |f: &str| -> Result<i32> {
                f.parse().map_err(|_| Error::parse(ln, format!("bad integer `{f}`")))
            };
            inst.push(int(fields[6])?);
            sem.push(int(fields[7])?);
            if with_segments {
                seg.push(
                    fields[8]
                        .parse()
                        .map_err(|_| Error::parse(ln, format!("bad segment id `{}`", fields[8])))?,
                );
            }
        }
        let tail_line = pts_ln + n + 1;
        if let Some((ln, l)) = lines.next() {
            if !l.is_empty() || lines.next().is_some() {
                return Err(Error::parse(ln, "trailing content after point block"));
            }
        } else if n > 0 {
            return Err(Error::parse(tail_line, "missing final newline"));
        }
        let scene = Scene {
            points,
            instance_id: inst,
            semantic_id: sem,
            catalog,
            segment_id: with_segments.then_some(seg),
        };
        scene
            .validate()
            .map_err(|e| Error::parse(pts_ln, e.to_string()))?;
        Ok(scene)
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    Scene::parse(&text).map_err(|e| e.with_path(path))
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene.to_text()?)?;
    Ok(())
}

/// Parameters of the synthetic room generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    /// Room extent along x, y, z in meters.
    pub room: [f64; 3],
    pub n_things: usize,
    /// Points sampled on every planar face (6 room faces, 5 faces per box).
    pub points_per_surface: usize,
    /// Gaussian coordinate jitter in meters.
    pub noise_sigma: f64,
    /// Horizontal box extent range in meters.
    pub box_size: (f64, f64),
    pub box_height: (f64, f64),
    /// Minimum gap between boxes and between boxes and walls.
    pub clearance: f64,
    pub catalog: ClassCatalog,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            room: [4.0, 4.0, 2.5],
            n_things: 8,
            points_per_surface: 44,
            noise_sigma: 0.005,
            box_size: (0.35, 0.7),
            box_height: (0.4, 1.0),
            clearance: 0.25,
            catalog: ClassCatalog::indoor(),
        }
    }
}

/// An axis-aligned box placed on the floor by the generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub semantic: usize,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.55, 0.45, 0.30],
    [0.85, 0.85, 0.80],
    [0.95, 0.95, 0.50],
    [0.80, 0.15, 0.15],
    [0.15, 0.60, 0.20],
    [0.20, 0.25, 0.85],
    [0.60, 0.20, 0.70],
    [0.10, 0.75, 0.75],
];

/// Base color for a semantic class.
pub fn class_color(semantic: usize) -> [f64; 3] {
    let base = PALETTE[semantic % PALETTE.len()];
    if semantic < PALETTE.len() {
        base
    } else {
        // cycle with a shift so repeated palette entries stay apart
        let s = 0.15 * ((semantic / PALETTE.len()) % 3) as f64;
        [(base[0] + s) % 1.0, base[1], (base[2] + 1.0 - s) % 1.0]
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    jitter: Normal<f64>,
}

impl Sampler {
    fn point_on_rect(&mut self, origin: [f64; 3], u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
        let a: f64 = self.rng.random();
        let b: f64 = self.rng.random();
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = origin[k] + a * u[k] + b * v[k] + self.jitter.sample(&mut self.rng);
        }
        p
    }

    fn color(&mut self, semantic: usize) -> [f64; 3] {
        let base = class_color(semantic);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (base[k] + self.rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
        }
        c
    }
}

fn overlaps(a: &PlacedBox, b: &PlacedBox, gap: f64) -> bool {
    a.min[0] < b.max[0] + gap
        && b.min[0] < a.max[0] + gap
        && a.min[1] < b.max[1] + gap
        && b.min[1] < a.max[1] + gap
}

/// Places `n_things` non-overlapping boxes; the same seed always gives the same layout.
pub fn place_boxes(seed: u64, params: &SyntheticParams) -> Result<Vec<PlacedBox>> {
    let things = params.catalog.thing_ids();
    if params.n_things > 0 && things.is_empty() {
        return Err(Error::Contract("catalog has no thing classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0c5);
    let [rx, ry, _] = params.room;
    let mut boxes: Vec<PlacedBox> = Vec::with_capacity(params.n_things);
    for i in 0..params.n_things {
        let mut placed = false;
        for _ in 0..2000 {
            let sx = rng.random_range(params.box_size.0..=params.box_size.1);
            let sy = rng.random_range(params.box_size.0..=params.box_size.1);
            let h = rng.random_range(params.box_height.0..=params.box_height.1);
            let lo_x = params.clearance;
            let hi_x = rx - params.clearance - sx;
            let lo_y = params.clearance;
            let hi_y = ry - params.clearance - sy;
            if hi_x <= lo_x || hi_y <= lo_y {
                continue;
            }
            let x0 = rng.random_range(lo_x..hi_x);
            let y0 = rng.random_range(lo_y..hi_y);
            let cand = PlacedBox {
                min: [x0, y0, 0.0],
                max: [x0 + sx, y0 + sy, h.min(params.room[2] - params.clearance)],
                semantic: things[i % things.len()],
            };
            if boxes.iter().all(|b| !overlaps(b, &cand, params.clearance)) {
                boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                requested: params.n_things,
                placed: boxes.len(),
            });
        }
    }
    Ok(boxes)
}

/// Samples a fully labeled axis-aligned room: floor, walls and ceiling as
/// stuff, and floor-standing boxes as thing instances.
///
/// The catalog must start with `floor`, `wall`, `ceiling`-like stuff classes
/// in that order; they are addressed as semantic ids 0, 1 and 2.
pub fn generate_synthetic_scene(seed: u64, params: &SyntheticParams) -> Result<Scene> {
    if params.room.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
        return Err(Error::Contract("room dimensions must be positive".into()));
    }
    let stuff = params.catalog.stuff_ids();
    if stuff.len() < 3 {
        return Err(Error::Contract(
            "synthetic rooms need three stuff classes (floor, wall, ceiling)".into(),
        ));
    }
    let (floor, wall, ceiling) = (stuff[0], stuff[1], stuff[2]);
    let boxes = place_boxes(seed, params)?;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        jitter: Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?,
    };
    let [rx, ry, rz] = params.room;
    let n = params.points_per_surface;
    let mut points = Vec::new();
    let mut inst = Vec::new();
    let mut sem = Vec::new();
    let mut emit = |s: &mut Sampler, p: [f64; 3], semantic: usize, instance: i32| {
        let c = s.color(semantic);
        points.push([p[0], p[1], p[2], c[0], c[1], c[2]]);
        inst.push(instance);
        sem.push(semantic as i32);
    };

    // floor, skipping box footprints
    let mut count = 0;
    let mut tries = 0;
    while count < n && tries < n * 1000 {
        tries += 1;
        let p = s.point_on_rect([0.0, 0.0, 0.0], [rx, 0.0, 0.0], [0.0, ry, 0.0]);
        let covered = boxes.iter().any(|b| {
            p[0] >= b.min[0] && p[0] <= b.max[0] && p[1] >= b.min[1] && p[1] <= b.max[1]
        });
        if !covered {
            emit(&mut s, p, floor, -1);
            count += 1;
        }
    }
    for _ in 0..n {
        let p = s.point_on_rect([0.0, 0.0, rz], [rx, 0.0, 0.0], [0.0, ry, 0.0]);
        emit(&mut s, p, ceiling, -1);
    }
    let walls: [([f64; 3], [f64; 3]); 4] = [
        ([0.0, 0.0, 0.0], [rx, 0.0, 0.0]),
        ([0.0, ry, 0.0], [rx, 0.0, 0.0]),
        ([0.0, 0.0, 0.0], [0.0, ry, 0.0]),
        ([rx, 0.0, 0.0], [0.0, ry, 0.0]),
    ];
    for (o, u) in walls {
        for _ in 0..n {
            let p = s.point_on_rect(o, u, [0.0, 0.0, rz]);
            emit(&mut s, p, wall, -1);
        }
    }
    for (id, b) in boxes.iter().enumerate() {
        let [x0, y0, z0] = b.min;
        let [x1, y1, z1] = b.max;
        let (dx, dy, dz) = (x1 - x0, y1 - y0, z1 - z0);
        let faces: [([f64; 3], [f64; 3], [f64; 3]); 5] = [
            ([x0, y0, z1], [dx, 0.0, 0.0], [0.0, dy, 0.0]),
            ([x0, y0, z0], [dx, 0.0, 0.0], [0.0, 0.0, dz]),
            ([x0, y1, z0], [dx, 0.0, 0.0], [0.0, 0.0, dz]),
            ([x0, y0, z0], [0.0, dy, 0.0], [0.0, 0.0, dz]),
            ([x1, y0, z0], [0.0, dy, 0.0], [0.0, 0.0, dz]),
        ];
        for (o, u, v) in faces {
            for _ in 0..n {
                let p = s.point_on_rect(o, u, v);
                emit(&mut s, p, b.semantic, id as i32);
            }
        }
    }
    Scene::new(points, inst, sem, params.catalog.clone())
}

/// Which augmentations are enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub z_rotate: bool,
    pub scale: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        Self {
            flip: true,
            z_rotate: true,
            scale: true,
        }
    }
}

/// A concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_x: bool,
    /// Rotation about the vertical axis through the xy centroid, radians.
    pub angle: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_x: false,
            angle: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample(seed: u64, flags: AugmentFlags) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip: f64 = rng.random();
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let scale: f64 = rng.random_range(0.9..1.1);
        Self {
            flip_x: flags.flip && flip < 0.5,
            angle: if flags.z_rotate { angle } else { 0.0 },
            scale: if flags.scale { scale } else { 1.0 },
        }
    }
}

/// Applies a fixed flip/rotation/scale; labels are untouched.
pub fn apply_augment(scene: &Scene, params: AugmentParams) -> Scene {
    if params == AugmentParams::identity() {
        return scene.clone();
    }
    let n = scene.len() as f64;
    let cx = scene.points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = scene.points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (sin, cos) = params.angle.sin_cos();
    let mut out = scene.clone();
    for p in &mut out.points {
        let mut x = p[0] - cx;
        let y = p[1] - cy;
        if params.flip_x {
            x = -x;
        }
        let rx = cos * x - sin * y;
        let ry = sin * x + cos * y;
        p[0] = cx + params.scale * rx;
        p[1] = cy + params.scale * ry;
        p[2] *= params.scale;
    }
    out
}

pub fn augment(scene: &Scene, seed: u64, flags: AugmentFlags) -> Scene {
    apply_augment(scene, AugmentParams::sample(seed, flags))
}
