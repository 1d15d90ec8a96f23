//! `SCN v1` text container.
//!
//! ```text
//! SCN v1
//! config <json>
//! scenes <N>
//! scene <seed> <objects> <slots> <D> <cameras>
//! camera <width> <height> <fx> <fy> <cx> <cy> <16 extrinsic values, row-major>
//! object <class> <mode> <confused class|-> <cx> <cy> <cz> <l> <w> <h> <yaw> <d> <d teacher values>
//! slot <object|-> <D values>
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so reading back is bit-exact.

use std::fmt::Write as _;
use std::path::Path;
use std::str::SplitWhitespace;

use super::{Scene, SceneConfig, SceneObject};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Camera, Intrinsics};
use crate::numkernel::Tensor;

pub const SCN_MAGIC: &str = "SCN v1";

fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        write!(out, " {v:?}").expect("write to string");
    }
}

pub fn write_corpus(path: &Path, config: &SceneConfig, scenes: &[Scene]) -> Result<()> {
    let json = serde_json::to_string(config).map_err(|e| Error::invalid(format!("config echo: {e}")))?;
    let mut out = format!("{SCN_MAGIC}\nconfig {json}\nscenes {}\n", scenes.len());
    for s in scenes {
        writeln!(
            out,
            "scene {} {} {} {} {}",
            s.seed,
            s.objects.len(),
            s.slots.len(),
            s.observations.cols(),
            s.rig.len()
        )
        .expect("write to string");
        for cam in &s.rig {
            let k = &cam.intrinsic;
            out.push_str("camera");
            push_floats(&mut out, [cam.width, cam.height, k.fx, k.fy, k.cx, k.cy]);
            push_floats(&mut out, cam.extrinsic.iter().flatten().copied());
            out.push('\n');
        }
        for o in &s.objects {
            let b = &o.bbox;
            let confused = o.confused_with.map_or("-".to_string(), |c| c.to_string());
            write!(out, "object {} {} {confused}", b.class_id, o.mode).expect("write to string");
            push_floats(&mut out, b.center.iter().chain(&b.size).copied().chain([b.yaw]));
            write!(out, " {}", o.teacher.len()).expect("write to string");
            push_floats(&mut out, o.teacher.iter().copied());
            out.push('\n');
        }
        for (i, slot) in s.slots.iter().enumerate() {
            let owner = slot.map_or("-".to_string(), |o| o.to_string());
            write!(out, "slot {owner}").expect("write to string");
            push_floats(&mut out, s.observations.row(i).iter().copied());
            out.push('\n');
        }
        out.push_str("end\n");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: String,
    line_no: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            reason: format!("line {}: {}", self.line_no, reason.into()),
        }
    }

    fn line(&mut self, tag: &str) -> Result<(SplitWhitespace<'a>, &'a str)> {
        let (i, line) = self
            .lines
            .next()
            .ok_or_else(|| self.err(format!("unexpected end of file, expected `{tag}`")))?;
        self.line_no = i + 1;
        let mut fields = line.split_whitespace();
        if fields.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}`")));
        }
        Ok((fields, line))
    }

    fn parse<T: std::str::FromStr>(&self, fields: &mut SplitWhitespace<'_>, what: &str) -> Result<T> {
        let f = fields.next().ok_or_else(|| self.err(format!("missing {what}")))?;
        f.parse().map_err(|_| self.err(format!("bad {what} `{f}`")))
    }

    fn optional(&self, fields: &mut SplitWhitespace<'_>, what: &str) -> Result<Option<usize>> {
        match fields.next() {
            Some("-") => Ok(None),
            Some(f) => f.parse().map(Some).map_err(|_| self.err(format!("bad {what} `{f}`"))),
            None => Err(self.err(format!("missing {what}"))),
        }
    }

    fn floats(&self, fields: &mut SplitWhitespace<'_>, n: usize, what: &str) -> Result<Vec<f64>> {
        let v = (0..n).map(|_| self.parse::<f64>(fields, what)).collect::<Result<Vec<_>>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn done(&self, mut fields: SplitWhitespace<'_>) -> Result<()> {
        match fields.next() {
            None => Ok(()),
            Some(f) => Err(self.err(format!("unexpected trailing field `{f}`"))),
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<(SceneConfig, Vec<Scene>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        lines: text.lines().enumerate(),
        path: path.display().to_string(),
        line_no: 0,
    };
    match r.lines.next() {
        Some((_, l)) if l == SCN_MAGIC => r.line_no = 1,
        Some((_, l)) if l.starts_with("SCN ") => return Err(r.err(format!("unsupported version `{l}`"))),
        _ => return Err(r.err(format!("missing `{SCN_MAGIC}` header"))),
    }
    let (_, line) = r.line("config")?;
    let config: SceneConfig =
        serde_json::from_str(&line["config ".len()..]).map_err(|e| r.err(format!("config echo: {e}")))?;
    let (mut f, _) = r.line("scenes")?;
    let n: usize = r.parse(&mut f, "scene count")?;
    r.done(f)?;

    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut f, _) = r.line("scene")?;
        let seed: u64 = r.parse(&mut f, "seed")?;
        let n_obj: usize = r.parse(&mut f, "object count")?;
        let n_slots: usize = r.parse(&mut f, "slot count")?;
        let dim: usize = r.parse(&mut f, "observation dim")?;
        let n_cam: usize = r.parse(&mut f, "camera count")?;
        r.done(f)?;

        let mut rig = Vec::with_capacity(n_cam);
        for _ in 0..n_cam {
            let (mut f, _) = r.line("camera")?;
            let v = r.floats(&mut f, 22, "camera value")?;
            r.done(f)?;
            let ext = std::array::from_fn(|i| std::array::from_fn(|j| v[6 + i * 4 + j]));
            let intrinsic = Intrinsics {
                fx: v[2],
                fy: v[3],
                cx: v[4],
                cy: v[5],
            };
            rig.push(Camera::new(ext, intrinsic, v[0], v[1]).map_err(|e| r.err(e.to_string()))?);
        }

        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let (mut f, _) = r.line("object")?;
            let class: usize = r.parse(&mut f, "class")?;
            let mode: usize = r.parse(&mut f, "mode")?;
            let confused_with = r.optional(&mut f, "confused class")?;
            let g = r.floats(&mut f, 7, "box value")?;
            let d: usize = r.parse(&mut f, "teacher dim")?;
            let teacher = r.floats(&mut f, d, "teacher value")?;
            r.done(f)?;
            let bbox = Box3D::new([g[0], g[1], g[2]], [g[3], g[4], g[5]], g[6], class).map_err(|e| r.err(e.to_string()))?;
            objects.push(SceneObject {
                bbox,
                mode,
                confused_with,
                teacher,
            });
        }

        let mut slots = Vec::with_capacity(n_slots);
        let mut data = Vec::with_capacity(n_slots * dim);
        for _ in 0..n_slots {
            let (mut f, _) = r.line("slot")?;
            let owner = r.optional(&mut f, "slot owner")?;
            if owner.is_some_and(|o| o >= n_obj) {
                return Err(r.err("slot refers to a missing object"));
            }
            data.extend(r.floats(&mut f, dim, "observation value")?);
            r.done(f)?;
            slots.push(owner);
        }
        let (f, _) = r.line("end")?;
        r.done(f)?;
        scenes.push(Scene {
            seed,
            objects,
            slots,
            observations: Tensor::matrix(n_slots, dim, data)?,
            rig,
        });
    }
    if let Some((i, l)) = r.lines.by_ref().find(|(_, l)| !l.trim().is_empty()) {
        r.line_no = i + 1;
        return Err(r.err(format!("trailing data `{l}`")));
    }
    Ok((config, scenes))
}
