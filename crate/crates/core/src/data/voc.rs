use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use quick_xml::events::Event;
use quick_xml::Reader;

use super::{class_id, CLASSES};
use crate::detect::{BBox, GroundTruth};
use crate::error::VocError;

/// Annotation header and boxes of one VOC-style XML file.
#[derive(Debug, Clone, PartialEq)]
pub struct VocAnnotation {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub boxes: Vec<GroundTruth>,
}

#[derive(Debug, Default)]
struct Node {
    name: String,
    text: String,
    children: Vec<Node>,
}

impl Node {
    fn child(&self, name: &str) -> Option<&Node> {
        self.children.iter().find(|c| c.name == name)
    }
}

struct Ctx<'a> {
    file: &'a Path,
}

impl Ctx<'_> {
    fn err(&self, element: impl Into<String>, msg: impl Into<String>) -> VocError {
        VocError {
            file: self.file.to_path_buf(),
            element: element.into(),
            msg: msg.into(),
        }
    }

    fn field<'n>(&self, node: &'n Node, path: &str, name: &str) -> Result<&'n Node, VocError> {
        node.child(name)
            .ok_or_else(|| self.err(path, format!("missing <{name}>")))
    }

    fn number(&self, node: &Node, path: &str, name: &str) -> Result<f64, VocError> {
        let f = self.field(node, path, name)?;
        let text = f.text.trim();
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(format!("{path}/{name}"), format!("`{text}` is not a number")))
    }
}

fn parse_tree(xml: &str, ctx: &Ctx) -> Result<Node, VocError> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<Node> = vec![Node::default()];
    loop {
        let ev = reader
            .read_event()
            .map_err(|e| ctx.err(stack.last().map_or("", |n| n.name.as_str()), format!("malformed XML: {e}")))?;
        match ev {
            Event::Start(e) => stack.push(Node {
                name: String::from_utf8_lossy(e.name().as_ref()).into_owned(),
                ..Node::default()
            }),
            Event::Empty(e) => {
                let node = Node {
                    name: String::from_utf8_lossy(e.name().as_ref()).into_owned(),
                    ..Node::default()
                };
                stack.last_mut().expect("root").children.push(node);
            }
            Event::Text(t) => {
                let s = t
                    .unescape()
                    .map_err(|e| ctx.err(stack.last().map_or("", |n| n.name.as_str()), format!("bad text: {e}")))?;
                stack.last_mut().expect("root").text.push_str(&s);
            }
            Event::End(_) => {
                let done = stack.pop().expect("balanced");
                match stack.last_mut() {
                    Some(parent) => parent.children.push(done),
                    None => return Err(ctx.err(done.name, "unbalanced closing tag")),
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if stack.len() != 1 {
        let open = stack.last().map(|n| n.name.clone()).unwrap_or_default();
        return Err(ctx.err(open, "malformed XML: element not closed"));
    }
    let root = stack.pop().expect("root");
    root.children
        .into_iter()
        .find(|c| c.name == "annotation")
        .ok_or_else(|| ctx.err("annotation", "missing <annotation> root"))
}

/// Parse VOC XML text; `file` is used only for error context.
pub fn parse_voc_str(xml: &str, file: &Path) -> Result<VocAnnotation, VocError> {
    let ctx = Ctx { file };
    let root = parse_tree(xml, &ctx)?;
    let filename = ctx.field(&root, "annotation", "filename")?.text.trim().to_string();
    let size = ctx.field(&root, "annotation", "size")?;
    let dim = |name: &str| -> Result<u32, VocError> {
        let v = ctx.number(size, "annotation/size", name)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(ctx.err(format!("annotation/size/{name}"), format!("{v} is not a valid extent")));
        }
        Ok(v as u32)
    };
    let (width, height, depth) = (dim("width")?, dim("height")?, dim("depth")?);
    if width == 0 || height == 0 {
        return Err(ctx.err("annotation/size", "image extents must be positive"));
    }
    let mut boxes = Vec::new();
    for (i, obj) in root.children.iter().filter(|c| c.name == "object").enumerate() {
        let path = format!("annotation/object[{i}]");
        let name = ctx.field(obj, &path, "name")?.text.trim();
        let class = class_id(name).ok_or_else(|| {
            ctx.err(
                format!("{path}/name"),
                format!("unknown class `{name}` (expected one of {})", CLASSES.join(", ")),
            )
        })?;
        let bpath = format!("{path}/bndbox");
        let bb = ctx.field(obj, &path, "bndbox")?;
        let (x1, y1, x2, y2) = (
            ctx.number(bb, &bpath, "xmin")?,
            ctx.number(bb, &bpath, "ymin")?,
            ctx.number(bb, &bpath, "xmax")?,
            ctx.number(bb, &bpath, "ymax")?,
        );
        if x2 <= x1 || y2 <= y1 {
            return Err(ctx.err(
                &bpath,
                format!("empty box: ({x1}, {y1}) - ({x2}, {y2}) needs xmax > xmin and ymax > ymin"),
            ));
        }
        if x1 < 0.0 || y1 < 0.0 || x2 > width as f64 || y2 > height as f64 {
            return Err(ctx.err(
                &bpath,
                format!("box ({x1}, {y1}) - ({x2}, {y2}) outside the {width}x{height} image"),
            ));
        }
        boxes.push(GroundTruth {
            class,
            bbox: BBox::from_corners(x1, y1, x2, y2),
        });
    }
    Ok(VocAnnotation {
        filename,
        width,
        height,
        depth,
        boxes,
    })
}

pub fn parse_voc_xml(path: &Path) -> Result<VocAnnotation, VocError> {
    let text = std::fs::read_to_string(path).map_err(|e| VocError {
        file: PathBuf::from(path),
        element: "annotation".into(),
        msg: format!("cannot read: {e}"),
    })?;
    parse_voc_str(&text, path)
}

/// Serialise an annotation; coordinates are written with up to 3 decimals.
pub fn write_voc_string(ann: &VocAnnotation) -> String {
    let mut s = String::new();
    let num = |v: f64| {
        let t = format!("{v:.3}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    };
    let _ = writeln!(s, "<annotation>");
    let _ = writeln!(s, "  <filename>{}</filename>", ann.filename);
    let _ = writeln!(
        s,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>{}</depth>\n  </size>",
        ann.width, ann.height, ann.depth
    );
    for g in &ann.boxes {
        let [x1, y1, x2, y2] = g.bbox.corners();
        let _ = writeln!(s, "  <object>\n    <name>{}</name>\n    <bndbox>", CLASSES[g.class]);
        let _ = writeln!(
            s,
            "      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>",
            num(x1),
            num(y1),
            num(x2),
            num(y2)
        );
        let _ = writeln!(s, "    </bndbox>\n  </object>");
    }
    s.push_str("</annotation>\n");
    s
}
