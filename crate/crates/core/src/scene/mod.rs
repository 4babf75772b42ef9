//! The procedural sprite world: subjects, actions, backgrounds, and the
//! deterministic renderer that produces frames with exact masks.
//!
//! Every color is an 8-bit RGB triple and every rendered value is the
//! exact tensor image of one of those triples, so PNG round trips are
//! lossless and compositing identities can be checked bit-for-bit.
//! Rasterization tests pixel centers against analytic shapes with
//! anti-aliasing off; a pixel is either fully inside a subject or fully
//! background, and the mask records exactly the pixels showing that
//! subject (later-drawn subjects occlude earlier ones).

pub mod corpus;
pub mod io;
pub mod mix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{ActionWord, BackgroundWord, PromptAst, RareId, ShapeWord, SubjectClause};
use serde::{Deserialize, Serialize};

/// Distinct sprite colors used by corpus sampling and benchmarks.
pub const SUBJECT_COLORS: [[u8; 3]; 10] = [
    [220, 50, 47],   // red
    [38, 139, 210],  // blue
    [64, 180, 80],   // green
    [240, 200, 40],  // yellow
    [211, 54, 130],  // magenta
    [42, 161, 152],  // teal
    [235, 120, 30],  // orange
    [108, 113, 196], // violet
    [250, 250, 250], // white
    [60, 60, 70],    // charcoal
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: ShapeWord,
    pub base_color: [u8; 3],
    pub accent_color: [u8; 3],
    /// Diameter as a fraction of the frame's shorter side.
    pub size: f32,
    pub identity: Option<RareId>,
}

impl SubjectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.size <= 1.0) {
            return Err(Error::Scene(format!("subject size {} outside (0, 1]", self.size)));
        }
        if self.base_color == self.accent_color {
            return Err(Error::Scene("base and accent colors must differ".into()));
        }
        Ok(())
    }

    /// The clause this subject contributes to a caption.
    pub fn clause(&self, action: Option<ActionWord>) -> SubjectClause {
        SubjectClause {
            identity: self.identity,
            shape: self.shape,
            action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action: ActionWord,
    /// Horizontal pixels per frame for the slide actions.
    pub velocity: f32,
    /// Peak vertical offset in pixels for bounce.
    pub amplitude: f32,
    /// Radians per frame for spin.
    pub angular_rate: f32,
    /// Relative size increase across the clip for grow.
    pub growth: f32,
}

impl ActionSpec {
    /// Default motion magnitudes for a given frame width. Slides move a
    /// whole number of pixels per frame so centroids track exactly.
    pub fn standard(action: ActionWord, width: usize) -> ActionSpec {
        let v = (width as f32 / 16.0).round().max(1.0);
        let mut spec = ActionSpec {
            action,
            velocity: 0.0,
            amplitude: 0.0,
            angular_rate: 0.0,
            growth: 0.0,
        };
        match action {
            ActionWord::SlideRight | ActionWord::SlideLeft => spec.velocity = v,
            ActionWord::Bounce => spec.amplitude = (width as f32 / 5.0).round(),
            ActionWord::Spin => spec.angular_rate = 0.35,
            ActionWord::Grow => spec.growth = 0.6,
            ActionWord::Still => {}
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let moving = self.velocity != 0.0
            || self.amplitude != 0.0
            || self.angular_rate != 0.0
            || self.growth != 0.0;
        let ok = match self.action {
            ActionWord::SlideRight | ActionWord::SlideLeft => {
                self.velocity > 0.0 && self.amplitude == 0.0 && self.angular_rate == 0.0 && self.growth == 0.0
            }
            ActionWord::Bounce => self.amplitude > 0.0 && self.velocity == 0.0 && self.angular_rate == 0.0 && self.growth == 0.0,
            ActionWord::Spin => self.angular_rate != 0.0 && self.velocity == 0.0 && self.amplitude == 0.0 && self.growth == 0.0,
            ActionWord::Grow => self.growth > 0.0 && self.velocity == 0.0 && self.amplitude == 0.0 && self.angular_rate == 0.0,
            ActionWord::Still => !moving,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Scene(format!(
                "motion parameters do not fit action {:?}",
                self.action
            )))
        }
    }
}

/// Where a subject is at one moment: center, rotation, relative scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f32,
    pub y: f32,
    pub theta: f32,
    pub scale: f32,
}

impl ActionSpec {
    /// Pose at frame `f` of `frames`, starting centered at `start`.
    pub fn pose_at(&self, start: (f32, f32), f: usize, frames: usize) -> Pose {
        let (x0, y0) = start;
        let fr = f as f32;
        let mut pose = Pose {
            x: x0,
            y: y0,
            theta: 0.0,
            scale: 1.0,
        };
        match self.action {
            ActionWord::SlideRight => pose.x = x0 + self.velocity * fr,
            ActionWord::SlideLeft => pose.x = x0 - self.velocity * fr,
            ActionWord::Bounce => {
                // Half-period of two frames: alternating ground/apex for
                // short clips, a clean up-down for longer ones.
                let lift = (self.amplitude
                    * (std::f32::consts::PI * fr / 2.0).sin().abs())
                .round();
                pose.y = y0 - lift;
            }
            ActionWord::Spin => pose.theta = self.angular_rate * fr,
            ActionWord::Grow => {
                let span = (frames.max(2) - 1) as f32;
                pose.scale = 1.0 + self.growth * fr / span;
            }
            ActionWord::Still => {}
        }
        pose
    }

    /// Largest scale the action ever reaches (bounds checking).
    pub fn max_scale(&self) -> f32 {
        if self.action == ActionWord::Grow {
            1.0 + self.growth
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlacement {
    pub subject: SubjectSpec,
    pub action: ActionSpec,
    pub start: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub placements: Vec<ScenePlacement>,
    pub background: BackgroundWord,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// One rendered clip: frames, exact per-frame per-subject masks, and
/// the caption the scene realizes.
pub struct VideoSample {
    /// `[F, 3, H, W]` in `[-1, 1]`.
    pub frames: Tensor,
    /// `masks[f][s]` is the `[H, W]` 0/1 mask of subject `s` in frame `f`.
    pub masks: Vec<Vec<Tensor>>,
    pub caption: String,
}

pub fn color_to_f32(c: u8) -> f32 {
    c as f32 / 255.0 * 2.0 - 1.0
}

pub fn f32_to_color(v: f32) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Procedural background image as rows of exact palette colors.
pub fn render_background(bg: BackgroundWord, h: usize, w: usize) -> Vec<[u8; 3]> {
    let mut px = vec![[0u8; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            px[y * w + x] = match bg {
                BackgroundWord::Grass => {
                    if (y / 2) % 2 == 0 {
                        [70, 160, 60]
                    } else {
                        [58, 138, 50]
                    }
                }
                BackgroundWord::Beach => {
                    if y * 5 < h * 2 {
                        [135, 206, 235]
                    } else if y * 5 < h * 3 {
                        [60, 130, 200]
                    } else {
                        [237, 201, 140]
                    }
                }
                BackgroundWord::Sky => {
                    let t = y as f32 / (h.max(2) - 1) as f32;
                    let lerp = |a: f32, b: f32| (a + (b - a) * t).round() as u8;
                    [lerp(180.0, 90.0), lerp(220.0, 150.0), lerp(250.0, 230.0)]
                }
                BackgroundWord::Plain => [200, 200, 200],
            };
        }
    }
    px
}

/// Polygon outline of a shape with circumradius `r`, rotated by `theta`,
/// in image coordinates (y grows downward, first vertex pointing up).
/// Circles have no polygon; callers special-case them.
fn shape_polygon(shape: ShapeWord, r: f32, theta: f32) -> Vec<(f32, f32)> {
    let vertex = |radius: f32, angle: f32| {
        let a = angle + theta;
        (radius * a.cos(), radius * a.sin())
    };
    let tau = std::f32::consts::TAU;
    match shape {
        ShapeWord::Circle => Vec::new(),
        ShapeWord::Square => (0..4)
            .map(|k| vertex(0.919 * r, -tau / 8.0 + tau * k as f32 / 4.0))
            .collect(),
        ShapeWord::Triangle => (0..3)
            .map(|k| vertex(r, -tau / 4.0 + tau * k as f32 / 3.0))
            .collect(),
        ShapeWord::Star => (0..10)
            .map(|k| {
                let radius = if k % 2 == 0 { r } else { 0.45 * r };
                vertex(radius, -tau / 4.0 + tau * k as f32 / 10.0)
            })
            .collect(),
    }
}

/// Signed area via the shoelace formula; rasterized pixel counts are
/// checked against this independent oracle.
pub fn polygon_area(verts: &[(f32, f32)]) -> f32 {
    let n = verts.len();
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = verts[i];
        let (x1, y1) = verts[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    (a / 2.0).abs()
}

/// Analytic area of a shape at circumradius `r`.
pub fn shape_area(shape: ShapeWord, r: f32) -> f32 {
    match shape {
        ShapeWord::Circle => std::f32::consts::PI * r * r,
        _ => polygon_area(&shape_polygon(shape, r, 0.0)),
    }
}

fn point_in_polygon(verts: &[(f32, f32)], px: f32, py: f32) -> bool {
    // Even-odd crossing count against a ray toward +x.
    let n = verts.len();
    let mut inside = false;
    for i in 0..n {
        let (x0, y0) = verts[i];
        let (x1, y1) = verts[(i + 1) % n];
        if (y0 > py) != (y1 > py) {
            let cross_x = x0 + (py - y0) / (y1 - y0) * (x1 - x0);
            if px < cross_x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Pixel-center membership test for a subject at a pose. `r` is the
/// unscaled circumradius in pixels.
fn in_shape(shape: ShapeWord, r: f32, pose: &Pose, px: f32, py: f32) -> bool {
    let dx = px - pose.x;
    let dy = py - pose.y;
    let rr = r * pose.scale;
    match shape {
        ShapeWord::Circle => dx * dx + dy * dy <= rr * rr,
        _ => {
            let verts = shape_polygon(shape, rr, pose.theta);
            point_in_polygon(&verts, dx, dy)
        }
    }
}

fn in_accent(r: f32, pose: &Pose, px: f32, py: f32) -> bool {
    let rr = r * pose.scale;
    let ax = pose.x + 0.45 * rr * pose.theta.cos();
    let ay = pose.y + 0.45 * rr * pose.theta.sin();
    let ar = 0.22 * rr;
    let dx = px - ax;
    let dy = py - ay;
    dx * dx + dy * dy <= ar * ar
}

/// Pixel-center mask of a shape at circumradius `r`, rotated by `theta`
/// and centered in a `side` by `side` grid. Shape classifiers match
/// observed components against these.
pub fn prototype_mask(shape: ShapeWord, r: f32, theta: f32, side: usize) -> Vec<bool> {
    let c = side as f32 / 2.0;
    let pose = Pose {
        x: c,
        y: c,
        theta,
        scale: 1.0,
    };
    let mut m = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            m[y * side + x] = in_shape(shape, r, &pose, x as f32 + 0.5, y as f32 + 0.5);
        }
    }
    m
}

impl SceneSpec {
    pub fn caption_ast(&self) -> PromptAst {
        PromptAst {
            clauses: self
                .placements
                .iter()
                .map(|p| p.subject.clause(Some(p.action.action)))
                .collect(),
            background: Some(self.background),
        }
    }

    fn radius(&self, subject: &SubjectSpec) -> f32 {
        subject.size * self.height.min(self.width) as f32 / 2.0
    }

    /// Conservative bounding radius of a placement over the whole clip.
    fn support_radius(&self, p: &ScenePlacement) -> f32 {
        self.radius(&p.subject) * p.action.max_scale()
    }

    pub fn validate(&self) -> Result<()> {
        if self.placements.is_empty()
            || self.frames == 0
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Scene("scene needs subjects, frames, and extent".into()));
        }
        for p in &self.placements {
            p.subject.validate()?;
            p.action.validate()?;
        }
        // Every subject stays fully inside the frame for all frames.
        for f in 0..self.frames {
            for p in &self.placements {
                let pose = p.action.pose_at(p.start, f, self.frames);
                let r = self.radius(&p.subject) * pose.scale;
                if pose.x - r < 0.0
                    || pose.x + r > self.width as f32
                    || pose.y - r < 0.0
                    || pose.y + r > self.height as f32
                {
                    return Err(Error::Scene(format!(
                        "subject leaves the frame at frame {f}"
                    )));
                }
            }
        }
        // Initial positions must not overlap (bounding circles).
        for i in 0..self.placements.len() {
            for j in i + 1..self.placements.len() {
                let a = &self.placements[i];
                let b = &self.placements[j];
                let dx = a.start.0 - b.start.0;
                let dy = a.start.1 - b.start.1;
                let min_gap = self.support_radius(a) + self.support_radius(b);
                if (dx * dx + dy * dy).sqrt() < min_gap {
                    return Err(Error::Scene(format!(
                        "subjects {i} and {j} start closer than {min_gap} px"
                    )));
                }
            }
        }
        self.caption_ast().validate()
    }

    /// Rasterize frame `f`: the RGB byte image plus one exact mask per
    /// subject (pixels actually showing that subject; later placements
    /// draw over earlier ones).
    pub fn render_frame_bytes(&self, f: usize) -> Result<(Vec<[u8; 3]>, Vec<Vec<bool>>)> {
        if f >= self.frames {
            return Err(Error::Scene(format!("frame {f} of {}", self.frames)));
        }
        let (h, w) = (self.height, self.width);
        let mut img = render_background(self.background, h, w);
        let mut owner = vec![usize::MAX; h * w];
        for (s, p) in self.placements.iter().enumerate() {
            let pose = p.action.pose_at(p.start, f, self.frames);
            let r = self.radius(&p.subject);
            let rs = r * pose.scale;
            if pose.x - rs < 0.0
                || pose.x + rs > w as f32
                || pose.y - rs < 0.0
                || pose.y + rs > h as f32
            {
                return Err(Error::Scene(format!("subject {s} leaves frame {f}")));
            }
            let x_lo = (pose.x - rs).floor().max(0.0) as usize;
            let x_hi = ((pose.x + rs).ceil() as usize).min(w);
            let y_lo = (pose.y - rs).floor().max(0.0) as usize;
            let y_hi = ((pose.y + rs).ceil() as usize).min(h);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    if in_shape(p.subject.shape, r, &pose, px, py) {
                        let idx = y * w + x;
                        owner[idx] = s;
                        img[idx] = if in_accent(r, &pose, px, py) {
                            p.subject.accent_color
                        } else {
                            p.subject.base_color
                        };
                    }
                }
            }
        }
        let masks = (0..self.placements.len())
            .map(|s| owner.iter().map(|&o| o == s).collect())
            .collect();
        Ok((img, masks))
    }

    /// Frame `f` as tensors: `[3, H, W]` image and `[H, W]` masks.
    pub fn render_frame(&self, f: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let (img, masks) = self.render_frame_bytes(f)?;
        Ok((
            bytes_to_tensor(&img, self.height, self.width),
            masks
                .iter()
                .map(|m| mask_to_tensor(m, self.height, self.width))
                .collect(),
        ))
    }

    pub fn render_video(&self) -> Result<VideoSample> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.frames * 3 * h * w);
        let mut masks = Vec::with_capacity(self.frames);
        for f in 0..self.frames {
            let (img, frame_masks) = self.render_frame_bytes(f)?;
            for c in 0..3 {
                data.extend(img.iter().map(|p| color_to_f32(p[c])));
            }
            masks.push(
                frame_masks
                    .iter()
                    .map(|m| mask_to_tensor(m, h, w))
                    .collect(),
            );
        }
        Ok(VideoSample {
            frames: Tensor::new(data, &[self.frames, 3, h, w])?,
            masks,
            caption: self.caption_ast().render(),
        })
    }
}

pub fn bytes_to_tensor(px: &[[u8; 3]], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend(px.iter().map(|p| color_to_f32(p[c])));
    }
    Tensor::new(data, &[3, h, w]).expect("consistent dims")
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<[u8; 3]>> {
    let sh = t.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::shape(
            "tensor_to_bytes",
            format!("expected [3, H, W], got {sh:?}"),
        ));
    }
    let hw = sh[1] * sh[2];
    let d = t.data();
    Ok((0..hw)
        .map(|i| [f32_to_color(d[i]), f32_to_color(d[hw + i]), f32_to_color(d[2 * hw + i])])
        .collect())
}

pub fn mask_to_tensor(m: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(
        m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        &[h, w],
    )
    .expect("consistent dims")
}

/// A reference render of a subject alone: RGBA `[4, S, S]` with a hard
/// alpha channel, the stand-in for a user-provided reference photo.
pub fn render_reference(subject: &SubjectSpec, patch: usize, theta: f32) -> Result<Tensor> {
    subject.validate()?;
    let r = subject.size * patch as f32 / 2.0;
    let pose = Pose {
        x: patch as f32 / 2.0,
        y: patch as f32 / 2.0,
        theta,
        scale: 1.0,
    };
    if pose.x - r < 0.0 || pose.x + r > patch as f32 {
        return Err(Error::Scene(format!(
            "subject radius {r} does not fit a {patch} px patch"
        )));
    }
    let mut data = vec![0.0f32; 4 * patch * patch];
    let hw = patch * patch;
    for y in 0..patch {
        for x in 0..patch {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let idx = y * patch + x;
            if in_shape(subject.shape, r, &pose, px, py) {
                let color = if in_accent(r, &pose, px, py) {
                    subject.accent_color
                } else {
                    subject.base_color
                };
                for c in 0..3 {
                    data[c * hw + idx] = color_to_f32(color[c]);
                }
                data[3 * hw + idx] = 1.0;
            } else {
                for c in 0..3 {
                    data[c * hw + idx] = color_to_f32(0);
                }
            }
        }
    }
    Tensor::new(data, &[4, patch, patch])
}

/// The standard reference set: a few rotations of the same subject.
pub fn reference_set(subject: &SubjectSpec, patch: usize) -> Result<Vec<Tensor>> {
    [0.0f32, 0.35, -0.35, 0.7]
        .iter()
        .map(|&t| render_reference(subject, patch, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(shape: ShapeWord, size: f32) -> SubjectSpec {
        SubjectSpec {
            shape,
            base_color: [220, 50, 47],
            accent_color: [250, 250, 250],
            size,
            identity: None,
        }
    }

    fn single_scene(shape: ShapeWord, action: ActionWord, h: usize, w: usize, f: usize) -> SceneSpec {
        SceneSpec {
            placements: vec![ScenePlacement {
                subject: subject(shape, 0.4),
                action: ActionSpec::standard(action, w),
                start: (w as f32 / 2.0, h as f32 / 2.0),
            }],
            background: BackgroundWord::Plain,
            frames: f,
            height: h,
            width: w,
        }
    }

    fn mask_count(m: &Tensor) -> usize {
        m.data().iter().filter(|&&v| v > 0.5).count()
    }

    fn centroid(m: &Tensor) -> (f32, f32) {
        let w = m.shape()[1];
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in m.data().iter().enumerate() {
            if v > 0.5 {
                sx += (i % w) as f32 + 0.5;
                sy += (i / w) as f32 + 0.5;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn still_action_renders_identical_frames() {
        let scene = single_scene(ShapeWord::Square, ActionWord::Still, 16, 16, 4);
        let v = scene.render_video().unwrap();
        let hw = 3 * 16 * 16;
        let first = &v.frames.data()[..hw];
        for f in 1..4 {
            assert_eq!(&v.frames.data()[f * hw..(f + 1) * hw], first);
        }
    }

    #[test]
    fn slide_right_moves_centroid_exactly() {
        let mut scene = single_scene(ShapeWord::Circle, ActionWord::SlideRight, 32, 32, 4);
        scene.placements[0].start = (10.0, 16.0);
        let spec = &scene.placements[0].action;
        assert_eq!(spec.velocity, 2.0);
        let v = scene.render_video().unwrap();
        let (x0, y0) = centroid(&v.masks[0][0]);
        for f in 1..4 {
            let (x, y) = centroid(&v.masks[f][0]);
            assert!((x - x0 - 2.0 * f as f32).abs() < 1e-4, "frame {f}: {x} vs {x0}");
            assert!((y - y0).abs() < 1e-4);
        }
    }

    #[test]
    fn mask_pixel_counts_match_area_formulas() {
        for shape in [ShapeWord::Circle, ShapeWord::Square, ShapeWord::Triangle, ShapeWord::Star] {
            let mut scene = single_scene(shape, ActionWord::Still, 64, 64, 1);
            scene.placements[0].subject.size = 0.625; // r = 20 px
            let v = scene.render_video().unwrap();
            let count = mask_count(&v.masks[0][0]) as f32;
            let want = shape_area(shape, 20.0);
            let rel = (count - want).abs() / want;
            assert!(rel < 0.05, "{shape:?}: {count} px vs {want} ({rel:.3})");
        }
    }

    #[test]
    fn subject_leaving_the_frame_is_an_error() {
        let mut scene = single_scene(ShapeWord::Circle, ActionWord::SlideRight, 32, 32, 8);
        scene.placements[0].start = (24.0, 16.0); // 2 px/frame for 7 frames exits
        assert!(matches!(scene.validate(), Err(Error::Scene(_))));
        assert!(scene.render_video().is_err());
    }

    #[test]
    fn overlapping_initial_positions_are_rejected() {
        let mut scene = single_scene(ShapeWord::Circle, ActionWord::Still, 32, 32, 2);
        scene.placements.push(ScenePlacement {
            subject: subject(ShapeWord::Square, 0.4),
            action: ActionSpec::standard(ActionWord::Still, 32),
            start: (18.0, 16.0),
        });
        assert!(matches!(scene.validate(), Err(Error::Scene(_))));
    }

    #[test]
    fn occlusion_keeps_masks_disjoint() {
        // Two subjects sliding toward each other end up overlapping;
        // the later placement wins the contested pixels.
        let scene = SceneSpec {
            placements: vec![
                ScenePlacement {
                    subject: subject(ShapeWord::Circle, 0.3),
                    action: ActionSpec {
                        action: ActionWord::SlideRight,
                        velocity: 2.0,
                        amplitude: 0.0,
                        angular_rate: 0.0,
                        growth: 0.0,
                    },
                    start: (8.0, 16.0),
                },
                ScenePlacement {
                    subject: SubjectSpec {
                        base_color: [38, 139, 210],
                        ..subject(ShapeWord::Square, 0.3)
                    },
                    action: ActionSpec {
                        action: ActionWord::SlideLeft,
                        velocity: 2.0,
                        amplitude: 0.0,
                        angular_rate: 0.0,
                        growth: 0.0,
                    },
                    start: (24.0, 16.0),
                },
            ],
            background: BackgroundWord::Grass,
            frames: 5,
            height: 32,
            width: 32,
        };
        let v = scene.render_video().unwrap();
        let mut overlapped = false;
        for f in 0..5 {
            let a = &v.masks[f][0];
            let b = &v.masks[f][1];
            for i in 0..a.numel() {
                assert!(
                    !(a.data()[i] > 0.5 && b.data()[i] > 0.5),
                    "masks intersect at frame {f}"
                );
            }
            // Centers at frame 4: 16 px apart start, 2+2 px/frame closing.
            if f == 4 {
                let count_a = mask_count(a) as f32;
                let solo = shape_area(ShapeWord::Circle, 0.3 * 16.0);
                overlapped = count_a < solo * 0.9;
            }
        }
        assert!(overlapped, "subjects should have collided by the last frame");
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = single_scene(ShapeWord::Star, ActionWord::Spin, 32, 32, 4);
        let a = scene.render_video().unwrap();
        let b = scene.render_video().unwrap();
        assert!(a.frames.bits_eq(&b.frames));
    }

    #[test]
    fn caption_matches_scene_structure() {
        let mut scene = single_scene(ShapeWord::Triangle, ActionWord::Bounce, 32, 32, 4);
        scene.placements[0].subject.identity = Some(RareId::new(2).unwrap());
        let v = scene.render_video().unwrap();
        assert_eq!(v.caption, "a S2* triangle bounce on plain");
        let parsed = crate::text::parse_prompt(&v.caption).unwrap();
        assert_eq!(parsed, scene.caption_ast());
    }

    #[test]
    fn spin_rotates_the_accent() {
        let scene = single_scene(ShapeWord::Circle, ActionWord::Spin, 32, 32, 4);
        let v = scene.render_video().unwrap();
        let hw = 32 * 32;
        // The accent is white, base red: red channel separates them.
        let accent_pixels = |f: usize| -> Vec<usize> {
            let d = v.frames.data();
            (0..hw)
                .filter(|&i| {
                    v.masks[f][0].data()[i] > 0.5
                        && (d[f * 3 * hw + i] - color_to_f32(250)).abs() < 1e-6
                })
                .collect()
        };
        let first = accent_pixels(0);
        let later = accent_pixels(2);
        assert!(!first.is_empty() && !later.is_empty());
        assert_ne!(first, later, "accent must move as the sprite spins");
    }

    #[test]
    fn grow_increases_mask_area() {
        let scene = single_scene(ShapeWord::Circle, ActionWord::Grow, 32, 32, 4);
        let v = scene.render_video().unwrap();
        let areas: Vec<usize> = (0..4).map(|f| mask_count(&v.masks[f][0])).collect();
        assert!(areas.windows(2).all(|w| w[1] > w[0]), "{areas:?}");
        // Final scale 1.6: area ratio ~2.56.
        let ratio = areas[3] as f32 / areas[0] as f32;
        assert!((ratio - 2.56).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn byte_tensor_round_trip_is_exact() {
        let img = render_background(BackgroundWord::Beach, 16, 16);
        let t = bytes_to_tensor(&img, 16, 16);
        assert_eq!(tensor_to_bytes(&t).unwrap(), img);
    }

    #[test]
    fn references_have_hard_alpha_and_rotate() {
        let s = subject(ShapeWord::Triangle, 0.6);
        let refs = reference_set(&s, 24).unwrap();
        assert_eq!(refs.len(), 4);
        for r in &refs {
            assert_eq!(r.shape(), &[4, 24, 24]);
            let hw = 24 * 24;
            assert!(r.data()[3 * hw..].iter().all(|&a| a == 0.0 || a == 1.0));
        }
        let alpha = |t: &Tensor| t.data()[3 * 24 * 24..].to_vec();
        assert_ne!(alpha(&refs[0]), alpha(&refs[1]), "rotation changes the mask");
    }
}
