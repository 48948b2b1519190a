//! URDF parsing into a validated kinematic tree, plus serial-chain extraction.
//!
//! Supported subset: `<link>` with `<visual>`/`<collision>` primitives (box,
//! cylinder, sphere, mesh reference) and `<joint>` of kind fixed, revolute,
//! continuous or prismatic. Inertial data, transmissions and vendor
//! extensions are ignored. Xacro macros must be expanded beforehand.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis norms inside this band are accepted and normalized.
const AXIS_NORM_BAND: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UrdfError {
    #[error("malformed xml: {0}")]
    MalformedXml(String),
    #[error("duplicate {kind} name `{name}`")]
    DuplicateName { kind: &'static str, name: String },
    #[error("joint `{joint}` references unknown link `{link}`")]
    DanglingLinkReference { joint: String, link: String },
    #[error("link graph is not a tree: {0}")]
    CycleDetected(String),
    #[error("joint `{joint}` has unsupported type `{kind}`")]
    UnsupportedJointType { joint: String, kind: String },
    #[error("joint `{0}` requires a <limit> element")]
    MissingLimits(String),
    #[error("joint `{joint}` axis norm {norm} outside [0.9, 1.1]")]
    NonUnitAxis { joint: String, norm: f64 },
    #[error("invalid geometry in link `{link}`: {reason}")]
    InvalidGeometry { link: String, reason: String },
    #[error("invalid limits on joint `{joint}`: {reason}")]
    InvalidLimits { joint: String, reason: String },
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("no path from `{base}` to `{tip}`")]
    NoPath { base: String, tip: String },
}

/// Origin frame as written in URDF: translation then fixed-axis roll/pitch/yaw.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Origin {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

impl Origin {
    pub fn to_isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.xyz;
        let [r, p, yaw] = self.rpy;
        Isometry3::from_parts(
            Translation3::new(x, y, z),
            UnitQuaternion::from_euler_angles(r, p, yaw),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Geometry {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, length: f64 },
    Sphere { radius: f64 },
    /// Opaque file reference; never loaded.
    Mesh { filename: String, scale: [f64; 3] },
}

impl Geometry {
    fn validate(&self) -> Result<(), String> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{what} must be positive, got {v}"))
            }
        };
        match self {
            Geometry::Box { size } => size.iter().try_for_each(|&s| positive(s, "box size")),
            Geometry::Cylinder { radius, length } => {
                positive(*radius, "cylinder radius")?;
                positive(*length, "cylinder length")
            }
            Geometry::Sphere { radius } => positive(*radius, "sphere radius"),
            Geometry::Mesh { scale, .. } => scale.iter().try_for_each(|&s| positive(s, "mesh scale")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visual {
    pub origin: Origin,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    pub visuals: Vec<Visual>,
    pub collision: Option<Visual>,
}

impl Link {
    /// Visuals to draw; a link without any gets a unit box at its frame.
    pub fn render_visuals(&self) -> Vec<Visual> {
        if self.visuals.is_empty() {
            vec![Visual {
                origin: Origin::default(),
                geometry: Geometry::Box { size: [1.0, 1.0, 1.0] },
            }]
        } else {
            self.visuals.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Fixed,
    Revolute,
    Continuous,
    Prismatic,
}

impl JointKind {
    fn parse(joint: &str, s: &str) -> Result<Self, UrdfError> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "revolute" => Ok(Self::Revolute),
            "continuous" => Ok(Self::Continuous),
            "prismatic" => Ok(Self::Prismatic),
            other => Err(UrdfError::UnsupportedJointType {
                joint: joint.to_owned(),
                kind: other.to_owned(),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::Revolute => "revolute",
            Self::Continuous => "continuous",
            Self::Prismatic => "prismatic",
        }
    }

    pub fn is_actuated(self) -> bool {
        self != Self::Fixed
    }
}

/// Joint limits. `lower`/`upper` are absent for continuous joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub velocity: f64,
    pub effort: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub origin: Origin,
    pub axis: [f64; 3],
    pub limits: Option<JointLimits>,
}

impl Joint {
    pub fn axis_vector(&self) -> Vector3<f64> {
        Vector3::from(self.axis)
    }

    /// Clamp a joint coordinate into its position limits, if any.
    pub fn clamp(&self, q: f64) -> f64 {
        match self.limits {
            Some(JointLimits { lower: Some(lo), upper: Some(hi), .. }) => q.clamp(lo, hi),
            _ => q,
        }
    }

    pub fn velocity_limit(&self) -> Option<f64> {
        self.limits.map(|l| l.velocity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub root_link: String,
}

impl RobotModel {
    pub fn link(&self, name: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.name == name)
    }

    pub fn joint(&self, name: &str) -> Option<&Joint> {
        self.joints.iter().find(|j| j.name == name)
    }

    pub fn actuated_joint_count(&self) -> usize {
        self.joints.iter().filter(|j| j.kind.is_actuated()).count()
    }

    fn parent_joint_of(&self, link: &str) -> Option<&Joint> {
        self.joints.iter().find(|j| j.child == link)
    }

    /// Leaf link farthest from the root (by joint count), ties broken by
    /// document order. Used as the default end-effector.
    pub fn deepest_leaf(&self) -> &str {
        let parents: HashSet<&str> = self.joints.iter().map(|j| j.parent.as_str()).collect();
        let depth = |name: &str| {
            let mut d = 0usize;
            let mut cur = name;
            while let Some(j) = self.parent_joint_of(cur) {
                d += 1;
                cur = &j.parent;
            }
            d
        };
        let mut best = (self.root_link.as_str(), 0usize);
        for link in &self.links {
            if parents.contains(link.name.as_str()) {
                continue;
            }
            let d = depth(&link.name);
            if d > best.1 {
                best = (&link.name, d);
            }
        }
        best.0
    }

    /// Re-serialize to URDF XML. Parsing the output yields an equal model.
    pub fn to_urdf(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<?xml version=\"1.0\"?>");
        let _ = writeln!(out, "<robot name=\"{}\">", escape(&self.name));
        for link in &self.links {
            if link.visuals.is_empty() && link.collision.is_none() {
                let _ = writeln!(out, "  <link name=\"{}\"/>", escape(&link.name));
                continue;
            }
            let _ = writeln!(out, "  <link name=\"{}\">", escape(&link.name));
            for v in &link.visuals {
                write_visual(&mut out, "visual", v);
            }
            if let Some(c) = &link.collision {
                write_visual(&mut out, "collision", c);
            }
            let _ = writeln!(out, "  </link>");
        }
        for j in &self.joints {
            let _ = writeln!(
                out,
                "  <joint name=\"{}\" type=\"{}\">",
                escape(&j.name),
                j.kind.as_str()
            );
            let _ = writeln!(out, "    <parent link=\"{}\"/>", escape(&j.parent));
            let _ = writeln!(out, "    <child link=\"{}\"/>", escape(&j.child));
            let _ = writeln!(out, "    {}", origin_tag(&j.origin));
            let _ = writeln!(out, "    <axis xyz=\"{}\"/>", triple(&j.axis));
            if let Some(l) = &j.limits {
                let mut tag = String::from("    <limit");
                if let Some(lo) = l.lower {
                    let _ = write!(tag, " lower=\"{lo}\"");
                }
                if let Some(hi) = l.upper {
                    let _ = write!(tag, " upper=\"{hi}\"");
                }
                let _ = writeln!(tag, " velocity=\"{}\" effort=\"{}\"/>", l.velocity, l.effort);
                out.push_str(&tag);
            }
            let _ = writeln!(out, "  </joint>");
        }
        out.push_str("</robot>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn triple(v: &[f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn origin_tag(o: &Origin) -> String {
    format!("<origin xyz=\"{}\" rpy=\"{}\"/>", triple(&o.xyz), triple(&o.rpy))
}

fn write_visual(out: &mut String, tag: &str, v: &Visual) {
    let _ = writeln!(out, "    <{tag}>");
    let _ = writeln!(out, "      {}", origin_tag(&v.origin));
    let geom = match &v.geometry {
        Geometry::Box { size } => format!("<box size=\"{}\"/>", triple(size)),
        Geometry::Cylinder { radius, length } => {
            format!("<cylinder radius=\"{radius}\" length=\"{length}\"/>")
        }
        Geometry::Sphere { radius } => format!("<sphere radius=\"{radius}\"/>"),
        Geometry::Mesh { filename, scale } => format!(
            "<mesh filename=\"{}\" scale=\"{}\"/>",
            escape(filename),
            triple(scale)
        ),
    };
    let _ = writeln!(out, "      <geometry>{geom}</geometry>");
    let _ = writeln!(out, "    </{tag}>");
}

// ---------------------------------------------------------------------------
// parsing

fn malformed(msg: impl Into<String>) -> UrdfError {
    UrdfError::MalformedXml(msg.into())
}

fn parse_f64(s: &str, ctx: &str) -> Result<f64, UrdfError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| malformed(format!("{ctx}: `{s}` is not a number")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(malformed(format!("{ctx}: non-finite value `{s}`")))
    }
}

fn parse_triple(s: &str, ctx: &str) -> Result<[f64; 3], UrdfError> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(malformed(format!("{ctx}: expected 3 numbers, got `{s}`")));
    }
    Ok([
        parse_f64(parts[0], ctx)?,
        parse_f64(parts[1], ctx)?,
        parse_f64(parts[2], ctx)?,
    ])
}

fn required_attr<'a>(node: roxmltree::Node<'a, '_>, attr: &str) -> Result<&'a str, UrdfError> {
    node.attribute(attr).ok_or_else(|| {
        malformed(format!(
            "<{}> missing attribute `{attr}`",
            node.tag_name().name()
        ))
    })
}

fn child_element<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(tag))
}

fn parse_origin(node: roxmltree::Node) -> Result<Origin, UrdfError> {
    let Some(o) = child_element(node, "origin") else {
        return Ok(Origin::default());
    };
    Ok(Origin {
        xyz: o.attribute("xyz").map(|s| parse_triple(s, "origin xyz")).transpose()?.unwrap_or_default(),
        rpy: o.attribute("rpy").map(|s| parse_triple(s, "origin rpy")).transpose()?.unwrap_or_default(),
    })
}

fn parse_geometry(node: roxmltree::Node, link: &str) -> Result<Geometry, UrdfError> {
    let geom_node = child_element(node, "geometry")
        .ok_or_else(|| malformed(format!("link `{link}`: visual without <geometry>")))?;
    let shape = geom_node
        .children()
        .find(|c| c.is_element())
        .ok_or_else(|| malformed(format!("link `{link}`: empty <geometry>")))?;
    let geometry = match shape.tag_name().name() {
        "box" => Geometry::Box {
            size: parse_triple(required_attr(shape, "size")?, "box size")?,
        },
        "cylinder" => Geometry::Cylinder {
            radius: parse_f64(required_attr(shape, "radius")?, "cylinder radius")?,
            length: parse_f64(required_attr(shape, "length")?, "cylinder length")?,
        },
        "sphere" => Geometry::Sphere {
            radius: parse_f64(required_attr(shape, "radius")?, "sphere radius")?,
        },
        "mesh" => Geometry::Mesh {
            filename: required_attr(shape, "filename")?.to_owned(),
            scale: shape
                .attribute("scale")
                .map(|s| parse_triple(s, "mesh scale"))
                .transpose()?
                .unwrap_or([1.0, 1.0, 1.0]),
        },
        other => {
            return Err(UrdfError::InvalidGeometry {
                link: link.to_owned(),
                reason: format!("unknown shape <{other}>"),
            })
        }
    };
    geometry.validate().map_err(|reason| UrdfError::InvalidGeometry {
        link: link.to_owned(),
        reason,
    })?;
    Ok(geometry)
}

fn parse_link(node: roxmltree::Node) -> Result<Link, UrdfError> {
    let name = required_attr(node, "name")?.to_owned();
    let mut visuals = Vec::new();
    let mut collision = None;
    for child in node.children().filter(|c| c.is_element()) {
        match child.tag_name().name() {
            "visual" => visuals.push(Visual {
                origin: parse_origin(child)?,
                geometry: parse_geometry(child, &name)?,
            }),
            // only the first collision element is kept
            "collision" if collision.is_none() => {
                collision = Some(Visual {
                    origin: parse_origin(child)?,
                    geometry: parse_geometry(child, &name)?,
                })
            }
            _ => {}
        }
    }
    Ok(Link { name, visuals, collision })
}

fn parse_joint(node: roxmltree::Node) -> Result<Joint, UrdfError> {
    let name = required_attr(node, "name")?.to_owned();
    let kind = JointKind::parse(&name, required_attr(node, "type")?)?;
    let link_ref = |tag: &str| -> Result<String, UrdfError> {
        let el = child_element(node, tag)
            .ok_or_else(|| malformed(format!("joint `{name}` missing <{tag}>")))?;
        Ok(required_attr(el, "link")?.to_owned())
    };
    let parent = link_ref("parent")?;
    let child = link_ref("child")?;
    let origin = parse_origin(node)?;

    let mut axis = match child_element(node, "axis") {
        Some(a) => parse_triple(required_attr(a, "xyz")?, "axis xyz")?,
        None => [1.0, 0.0, 0.0],
    };
    if kind.is_actuated() {
        let norm = Vector3::from(axis).norm();
        if !(AXIS_NORM_BAND.0..=AXIS_NORM_BAND.1).contains(&norm) {
            return Err(UrdfError::NonUnitAxis { joint: name, norm });
        }
        // leave already-unit axes untouched so re-serialization is exact
        if (norm - 1.0).abs() > 1e-12 {
            axis = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
        }
    }

    let limit_node = child_element(node, "limit");
    let limits = match kind {
        JointKind::Fixed => None,
        JointKind::Revolute | JointKind::Prismatic | JointKind::Continuous => {
            let l = limit_node.ok_or_else(|| UrdfError::MissingLimits(name.clone()))?;
            let num = |attr: &str| -> Result<Option<f64>, UrdfError> {
                l.attribute(attr)
                    .map(|s| parse_f64(s, &format!("joint `{name}` limit {attr}")))
                    .transpose()
            };
            let velocity = num("velocity")?.ok_or_else(|| UrdfError::MissingLimits(name.clone()))?;
            let effort = num("effort")?.unwrap_or(0.0);
            if velocity < 0.0 || effort < 0.0 {
                return Err(UrdfError::InvalidLimits {
                    joint: name,
                    reason: "velocity and effort must be non-negative".into(),
                });
            }
            let (lower, upper) = if kind == JointKind::Continuous {
                (None, None)
            } else {
                let lo = num("lower")?.unwrap_or(0.0);
                let hi = num("upper")?.unwrap_or(0.0);
                if lo > hi {
                    return Err(UrdfError::InvalidLimits {
                        joint: name,
                        reason: format!("lower {lo} > upper {hi}"),
                    });
                }
                (Some(lo), Some(hi))
            };
            Some(JointLimits { lower, upper, velocity, effort })
        }
    };

    Ok(Joint { name, kind, parent, child, origin, axis, limits })
}

/// Parse and validate a URDF document.
pub fn parse_urdf(xml_text: &str) -> Result<RobotModel, UrdfError> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| malformed(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("robot") {
        return Err(malformed(format!(
            "root element is <{}>, expected <robot>",
            root.tag_name().name()
        )));
    }
    let name = required_attr(root, "name")?.to_owned();

    let mut links = Vec::new();
    let mut joints = Vec::new();
    for node in root.children().filter(|c| c.is_element()) {
        match node.tag_name().name() {
            "link" => links.push(parse_link(node)?),
            "joint" => joints.push(parse_joint(node)?),
            _ => {}
        }
    }

    let root_link = validate_tree(&links, &joints)?;
    Ok(RobotModel { name, links, joints, root_link })
}

fn validate_tree(links: &[Link], joints: &[Joint]) -> Result<String, UrdfError> {
    let mut link_names = HashSet::new();
    for l in links {
        if !link_names.insert(l.name.as_str()) {
            return Err(UrdfError::DuplicateName { kind: "link", name: l.name.clone() });
        }
    }
    let mut joint_names = HashSet::new();
    for j in joints {
        if !joint_names.insert(j.name.as_str()) {
            return Err(UrdfError::DuplicateName { kind: "joint", name: j.name.clone() });
        }
    }
    if links.is_empty() {
        return Err(malformed("robot has no links"));
    }

    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    for j in joints {
        for link in [&j.parent, &j.child] {
            if !link_names.contains(link.as_str()) {
                return Err(UrdfError::DanglingLinkReference {
                    joint: j.name.clone(),
                    link: link.clone(),
                });
            }
        }
        if j.parent == j.child {
            return Err(UrdfError::CycleDetected(format!("joint `{}` connects `{}` to itself", j.name, j.parent)));
        }
        if parent_of.insert(j.child.as_str(), j.parent.as_str()).is_some() {
            return Err(UrdfError::CycleDetected(format!("link `{}` has more than one parent joint", j.child)));
        }
    }

    let roots: Vec<&str> = links
        .iter()
        .map(|l| l.name.as_str())
        .filter(|n| !parent_of.contains_key(n))
        .collect();
    match roots.as_slice() {
        [] => return Err(UrdfError::CycleDetected("every link has a parent".into())),
        [_] => {}
        many => {
            return Err(UrdfError::CycleDetected(format!(
                "multiple root links: {}",
                many.join(", ")
            )))
        }
    }

    // every link must reach the root without revisiting
    for l in links {
        let mut seen = HashSet::new();
        let mut cur = l.name.as_str();
        while let Some(&p) = parent_of.get(cur) {
            if !seen.insert(cur) {
                return Err(UrdfError::CycleDetected(format!("cycle through link `{cur}`")));
            }
            cur = p;
        }
    }
    Ok(roots[0].to_owned())
}

// ---------------------------------------------------------------------------
// chains

/// One joint on a base→tip path.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSegment {
    pub joint: Joint,
    /// Index into the chain's joint vector, `None` for fixed joints.
    pub dof_index: Option<usize>,
}

/// Ordered joints from `base_link` to `tip_link`. Fixed joints stay in the
/// sequence as constant transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct JointChain {
    pub base_link: String,
    pub tip_link: String,
    pub segments: Vec<ChainSegment>,
    dof: usize,
}

impl JointChain {
    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn actuated(&self) -> impl Iterator<Item = &Joint> {
        self.segments.iter().filter(|s| s.dof_index.is_some()).map(|s| &s.joint)
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.actuated().map(|j| j.name.clone()).collect()
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (qi, j) in q.iter_mut().zip(self.actuated()) {
            *qi = j.clamp(*qi);
        }
    }

    /// Link names along the chain, base first.
    pub fn link_names(&self) -> Vec<String> {
        std::iter::once(self.base_link.clone())
            .chain(self.segments.iter().map(|s| s.joint.child.clone()))
            .collect()
    }

    fn from_joints(base: &str, tip: &str, joints: Vec<Joint>) -> Self {
        let mut dof = 0;
        let segments = joints
            .into_iter()
            .map(|joint| {
                let dof_index = joint.kind.is_actuated().then(|| {
                    dof += 1;
                    dof - 1
                });
                ChainSegment { joint, dof_index }
            })
            .collect();
        Self {
            base_link: base.to_owned(),
            tip_link: tip.to_owned(),
            segments,
            dof,
        }
    }
}

/// Extract the serial chain from `base_link` down to `tip_link`.
pub fn build_chain(model: &RobotModel, base_link: &str, tip_link: &str) -> Result<JointChain, UrdfError> {
    for l in [base_link, tip_link] {
        if model.link(l).is_none() {
            return Err(UrdfError::UnknownLink(l.to_owned()));
        }
    }
    let mut path = Vec::new();
    let mut cur = tip_link;
    while cur != base_link {
        let joint = model.parent_joint_of(cur).ok_or_else(|| UrdfError::NoPath {
            base: base_link.to_owned(),
            tip: tip_link.to_owned(),
        })?;
        path.push(joint.clone());
        cur = &joint.parent;
    }
    path.reverse();
    Ok(JointChain::from_joints(base_link, tip_link, path))
}
