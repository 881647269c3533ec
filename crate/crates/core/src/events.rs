//! Event-stream ingestion and preprocessing.
//!
//! Sensor events are cropped to a centered square, downsampled 2x by nearest
//! neighbour, and routed to one of four 16x16 corner windows. Routed events
//! are grouped into non-overlapping 5 ms windows, each corner keeping at most
//! 90 events (earliest first), and every window is encoded as a binary
//! `2 x 16 x 16` input spike tensor per corner.

use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{Shape, SpikeTensor};

pub const SENSOR_WIDTH: u16 = 240;
pub const SENSOR_HEIGHT: u16 = 180;
pub const WINDOW_US: u64 = 5_000;
pub const MAX_EVENTS_PER_CORNER: usize = 90;
pub const PATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Neg,
    Pos,
}

impl Polarity {
    /// Plane index in the input tensor: `-` is plane 0, `+` plane 1.
    pub fn index(self) -> usize {
        match self {
            Polarity::Neg => 0,
            Polarity::Pos => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Neg),
            1 => Some(Polarity::Pos),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds since stream start.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomRight,
    BottomLeft,
}

impl Corner {
    pub const ALL: [Corner; 4] = [
        Corner::TopLeft,
        Corner::TopRight,
        Corner::BottomRight,
        Corner::BottomLeft,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Corner::TopLeft => "TL",
            Corner::TopRight => "TR",
            Corner::BottomRight => "BR",
            Corner::BottomLeft => "BL",
        }
    }
}

/// An event that survived preprocessing, in corner-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalEvent {
    pub t: u64,
    pub corner: Corner,
    /// Column inside the corner window, `0..16`.
    pub x: u8,
    /// Row inside the corner window, `0..16`.
    pub y: u8,
    pub polarity: Polarity,
}

/// Crop / downsample / corner layout of the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorGeometry {
    pub sensor_width: u16,
    pub sensor_height: u16,
    pub crop_x: u16,
    pub crop_y: u16,
    pub crop_size: u16,
    pub downsample: u16,
    pub patch: u16,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            sensor_width: SENSOR_WIDTH,
            sensor_height: SENSOR_HEIGHT,
            crop_x: 30,
            crop_y: 0,
            crop_size: 180,
            downsample: 2,
            patch: PATCH_SIZE as u16,
        }
    }
}

impl SensorGeometry {
    /// Side length of the downsampled working frame (90 by default).
    pub fn frame_size(&self) -> u16 {
        self.crop_size / self.downsample
    }

    /// Top-left pixel of a corner window in working-frame coordinates.
    pub fn corner_origin(&self, corner: Corner) -> (u16, u16) {
        let far = self.frame_size() - self.patch;
        match corner {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (far, 0),
            Corner::BottomRight => (far, far),
            Corner::BottomLeft => (0, far),
        }
    }

    /// Corner anchor points of the working frame used to parameterize the
    /// homography, `(0,0) (N,0) (N,N) (0,N)` with `N` the frame size.
    pub fn frame_corners(&self) -> [[f64; 2]; 4] {
        let n = self.frame_size() as f64;
        [[0.0, 0.0], [n, 0.0], [n, n], [0.0, n]]
    }

    /// Map a sensor event to its corner window, if it lands in one.
    pub fn preprocess(&self, e: &Event) -> Option<LocalEvent> {
        if e.x < self.crop_x || e.y < self.crop_y {
            return None;
        }
        let cx = e.x - self.crop_x;
        let cy = e.y - self.crop_y;
        if cx >= self.crop_size || cy >= self.crop_size {
            return None;
        }
        let dx = cx / self.downsample;
        let dy = cy / self.downsample;
        let far = self.frame_size() - self.patch;
        let (corner, lx, ly) = match (dx < self.patch, dx >= far, dy < self.patch, dy >= far) {
            (true, _, true, _) => (Corner::TopLeft, dx, dy),
            (_, true, true, _) => (Corner::TopRight, dx - far, dy),
            (_, true, _, true) => (Corner::BottomRight, dx - far, dy - far),
            (true, _, _, true) => (Corner::BottomLeft, dx, dy - far),
            _ => return None,
        };
        Some(LocalEvent {
            t: e.t,
            corner,
            x: lx as u8,
            y: ly as u8,
            polarity: e.polarity,
        })
    }

    /// Inverse of the corner routing: working-frame coordinates of a local event.
    pub fn to_frame(&self, corner: Corner, x: f64, y: f64) -> [f64; 2] {
        let (ox, oy) = self.corner_origin(corner);
        [ox as f64 + x, oy as f64 + y]
    }
}

/// Parse the text event format: `t_us x y p` per line, `#` comments.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    let mut last_t = 0u64;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut field = |name: &str| {
            it.next()
                .ok_or_else(|| Error::Format(format!("missing {name} at line {lineno}")))
        };
        let t: u64 = parse_field(field("timestamp")?, "timestamp", lineno)?;
        let x: u16 = parse_field(field("x")?, "x", lineno)?;
        let y: u16 = parse_field(field("y")?, "y", lineno)?;
        let p: u8 = parse_field(field("polarity")?, "polarity", lineno)?;
        if it.next().is_some() {
            return Err(Error::Format(format!("trailing fields at line {lineno}")));
        }
        let polarity = Polarity::from_bit(p)
            .ok_or_else(|| Error::Format(format!("polarity must be 0 or 1 at line {lineno}")))?;
        if x >= SENSOR_WIDTH || y >= SENSOR_HEIGHT {
            return Err(Error::Format(format!(
                "pixel ({x}, {y}) outside sensor at line {lineno}"
            )));
        }
        if !out.is_empty() && t < last_t {
            return Err(Error::Format(format!("non-monotonic timestamp at line {lineno}")));
        }
        last_t = t;
        out.push(Event::new(t, x, y, polarity));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, lineno: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("invalid {name} {s:?} at line {lineno}")))
}

pub fn load_events(path: &Path) -> Result<Vec<Event>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(f))
}

pub fn format_events(events: &[Event]) -> String {
    let mut s = String::with_capacity(events.len() * 16 + 32);
    s.push_str("# t_us x y p\n");
    for e in events {
        s.push_str(&format!("{} {} {} {}\n", e.t, e.x, e.y, e.polarity.index()));
    }
    s
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    write_atomic(path, format_events(events).as_bytes())
}

/// One 5 ms slice of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub index: u64,
    pub t_start: u64,
    pub t_end: u64,
    /// Every routed event that fell in the window, before the per-corner cap.
    pub events: Vec<LocalEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerPatch {
    pub corner: Corner,
    pub events: Vec<LocalEvent>,
}

impl CornerPatch {
    pub fn empty(corner: Corner) -> Self {
        Self {
            corner,
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedWindow {
    pub window: EventWindow,
    pub patches: [CornerPatch; 4],
}

impl RoutedWindow {
    fn empty(index: u64) -> Self {
        Self {
            window: EventWindow {
                index,
                t_start: index * WINDOW_US,
                t_end: (index + 1) * WINDOW_US,
                events: Vec::new(),
            },
            patches: Corner::ALL.map(CornerPatch::empty),
        }
    }

    fn push(&mut self, e: LocalEvent) {
        self.window.events.push(e);
        let patch = &mut self.patches[e.corner.index()];
        if patch.events.len() < MAX_EVENTS_PER_CORNER {
            patch.events.push(e);
        }
    }
}

/// Streaming windower. Windows tile time from `t = 0`; empty windows are
/// still emitted so downstream consumers tick at a fixed rate.
pub struct Windower<I: Iterator> {
    inner: std::iter::Peekable<I>,
    next_index: u64,
    until: Option<u64>,
}

impl<I: Iterator<Item = LocalEvent>> Iterator for Windower<I> {
    type Item = RoutedWindow;

    fn next(&mut self) -> Option<RoutedWindow> {
        let idx = self.next_index;
        let has_event = self.inner.peek().is_some();
        let within = self.until.map_or(false, |end| idx * WINDOW_US < end);
        if !has_event && !within {
            return None;
        }
        let mut w = RoutedWindow::empty(idx);
        while let Some(e) = self.inner.peek() {
            if e.t >= w.window.t_end {
                break;
            }
            let e = self.inner.next().unwrap();
            w.push(e);
        }
        self.next_index += 1;
        Some(w)
    }
}

/// Group a time-ordered local event stream into 5 ms windows.
pub fn window_and_route<I>(events: I) -> Windower<I::IntoIter>
where
    I: IntoIterator<Item = LocalEvent>,
{
    Windower {
        inner: events.into_iter().peekable(),
        next_index: 0,
        until: None,
    }
}

/// Like [`window_and_route`] but keeps emitting (possibly empty) windows
/// until `t_end_us` is covered.
pub fn window_and_route_until<I>(events: I, t_end_us: u64) -> Windower<I::IntoIter>
where
    I: IntoIterator<Item = LocalEvent>,
{
    Windower {
        inner: events.into_iter().peekable(),
        next_index: 0,
        until: Some(t_end_us),
    }
}

/// Shape of the per-corner input tensor.
pub const INPUT_SHAPE: Shape = Shape::new(2, PATCH_SIZE, PATCH_SIZE);

/// Binary encoding: element `(p, y, x)` is set iff any event of polarity `p`
/// hit `(x, y)` in the window.
pub fn encode_input_spikes(patch: &CornerPatch) -> SpikeTensor {
    let mut t = SpikeTensor::zeros(INPUT_SHAPE);
    for e in &patch.events {
        t.set(e.polarity.index(), e.y as usize, e.x as usize, true);
    }
    t
}

/// Convenience: preprocess a whole sensor stream.
pub fn preprocess_stream<'a>(
    geometry: &'a SensorGeometry,
    events: &'a [Event],
) -> impl Iterator<Item = LocalEvent> + 'a {
    events.iter().filter_map(move |e| geometry.preprocess(e))
}

/// A ground-truth pose sample: `t_us px py pz qw qx qy qz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: u64,
    pub position: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`, world from body.
    pub orientation: [f64; 4],
}

pub fn parse_poses<R: BufRead>(reader: R) -> Result<Vec<PoseSample>> {
    let mut out: Vec<PoseSample> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!(
                "expected 8 pose fields at line {lineno}, found {}",
                fields.len()
            )));
        }
        let t: u64 = parse_field(fields[0], "timestamp", lineno)?;
        let mut v = [0.0f64; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = parse_field(f, "pose value", lineno)?;
        }
        if let Some(prev) = out.last() {
            if t <= prev.t {
                return Err(Error::Format(format!("non-monotonic timestamp at line {lineno}")));
            }
        }
        let q = [v[3], v[4], v[5], v[6]];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Format(format!("invalid quaternion at line {lineno}")));
        }
        out.push(PoseSample {
            t,
            position: [v[0], v[1], v[2]],
            orientation: q.map(|c| c / n),
        });
    }
    Ok(out)
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_poses(BufReader::new(f))
}

pub fn write_poses(path: &Path, poses: &[PoseSample]) -> Result<()> {
    let mut s = String::from("# t_us px py pz qw qx qy qz\n");
    for p in poses {
        s.push_str(&format!(
            "{} {:.9} {:.9} {:.9} {:.12} {:.12} {:.12} {:.12}\n",
            p.t,
            p.position[0],
            p.position[1],
            p.position[2],
            p.orientation[0],
            p.orientation[1],
            p.orientation[2],
            p.orientation[3]
        ));
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local(t: u64, corner: Corner, x: u8, y: u8) -> LocalEvent {
        LocalEvent {
            t,
            corner,
            x,
            y,
            polarity: Polarity::Pos,
        }
    }

    #[test]
    fn parses_single_line() {
        let ev = parse_events("1000 10 20 1\n".as_bytes()).unwrap();
        assert_eq!(ev, vec![Event::new(1000, 10, 20, Polarity::Pos)]);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert!(parse_events("".as_bytes()).unwrap().is_empty());
        assert!(parse_events("# only a comment\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn timestamp_regression_reports_line() {
        let err = parse_events("5 1 1 0\n3 1 1 0\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("non-monotonic timestamp at line 2"), "{err}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_events("1 2 3\n".as_bytes()).is_err());
        assert!(parse_events("1 2 3 2\n".as_bytes()).is_err());
        assert!(parse_events("1 240 3 1\n".as_bytes()).is_err());
        assert!(parse_events("x 2 3 1\n".as_bytes()).is_err());
    }

    #[test]
    fn corner_anchors() {
        let g = SensorGeometry::default();
        let tl = g.preprocess(&Event::new(0, 30, 0, Polarity::Pos)).unwrap();
        assert_eq!((tl.corner, tl.x, tl.y), (Corner::TopLeft, 0, 0));
        let br = g.preprocess(&Event::new(0, 209, 179, Polarity::Pos)).unwrap();
        assert_eq!((br.corner, br.x, br.y), (Corner::BottomRight, 15, 15));
        assert!(g.preprocess(&Event::new(0, 120, 90, Polarity::Pos)).is_none());
        // outside the horizontal crop
        assert!(g.preprocess(&Event::new(0, 29, 0, Polarity::Pos)).is_none());
        assert!(g.preprocess(&Event::new(0, 210, 0, Polarity::Pos)).is_none());
    }

    #[test]
    fn other_corners() {
        let g = SensorGeometry::default();
        let tr = g.preprocess(&Event::new(0, 209, 0, Polarity::Neg)).unwrap();
        assert_eq!((tr.corner, tr.x, tr.y), (Corner::TopRight, 15, 0));
        let bl = g.preprocess(&Event::new(0, 30, 179, Polarity::Neg)).unwrap();
        assert_eq!((bl.corner, bl.x, bl.y), (Corner::BottomLeft, 0, 15));
    }

    #[test]
    fn cap_keeps_first_ninety() {
        let evs: Vec<_> = (0..120).map(|i| local(i * 10, Corner::TopLeft, (i % 16) as u8, 0)).collect();
        let windows: Vec<_> = window_and_route(evs.clone()).collect();
        assert_eq!(windows.len(), 1);
        let patch = &windows[0].patches[0];
        assert_eq!(patch.events.len(), 90);
        assert_eq!(patch.events[..], evs[..90]);
        assert_eq!(windows[0].window.events.len(), 120);
    }

    #[test]
    fn half_open_windows() {
        let evs = vec![local(4999, Corner::TopLeft, 0, 0), local(5000, Corner::TopLeft, 1, 0)];
        let windows: Vec<_> = window_and_route(evs).collect();
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].patches[0].events[0].t, 4999);
        assert_eq!(windows[1].patches[0].events[0].t, 5000);
    }

    #[test]
    fn empty_spans_still_tick() {
        let evs = vec![local(100, Corner::TopLeft, 0, 0), local(17_000, Corner::BottomLeft, 0, 0)];
        let windows: Vec<_> = window_and_route(evs).collect();
        assert_eq!(windows.len(), 4);
        for w in &windows[1..3] {
            assert!(w.patches.iter().all(|p| p.events.is_empty()));
        }
        let padded: Vec<_> = window_and_route_until(Vec::new(), 20_000).collect();
        assert_eq!(padded.len(), 4);
    }

    #[test]
    fn encoding_rules() {
        let mut patch = CornerPatch::empty(Corner::TopLeft);
        patch.events.push(local(0, Corner::TopLeft, 3, 3));
        patch.events.push(local(1, Corner::TopLeft, 3, 3));
        let t = encode_input_spikes(&patch);
        assert_eq!(t.count(), 1);
        assert!(t.get(1, 3, 3));

        assert_eq!(encode_input_spikes(&CornerPatch::empty(Corner::TopLeft)).count(), 0);

        let mut patch = CornerPatch::empty(Corner::TopLeft);
        patch.events.push(LocalEvent { polarity: Polarity::Pos, ..local(0, Corner::TopLeft, 5, 7) });
        patch.events.push(LocalEvent { polarity: Polarity::Neg, ..local(0, Corner::TopLeft, 5, 7) });
        let t = encode_input_spikes(&patch);
        assert!(t.get(1, 7, 5) && t.get(0, 7, 5));
        assert_eq!(t.count(), 2);
    }

    #[test]
    fn downsample_is_floor_half_everywhere() {
        let g = SensorGeometry::default();
        for cy in 0..180u16 {
            for cx in 0..180u16 {
                let e = Event::new(0, cx + 30, cy, Polarity::Pos);
                let (dx, dy) = (cx / 2, cy / 2);
                match g.preprocess(&e) {
                    Some(l) => {
                        let (ox, oy) = g.corner_origin(l.corner);
                        assert_eq!((ox + l.x as u16, oy + l.y as u16), (dx, dy));
                    }
                    None => {
                        let in_x = dx < 16 || dx >= 74;
                        let in_y = dy < 16 || dy >= 74;
                        assert!(!(in_x && in_y), "({cx},{cy}) dropped");
                    }
                }
            }
        }
    }

    #[test]
    fn poses_roundtrip_text() {
        let txt = "# header\n0 0 0 2 1 0 0 0\n5556 0.1 0 2 0.7071 0.7071 0 0\n";
        let poses = parse_poses(txt.as_bytes()).unwrap();
        assert_eq!(poses.len(), 2);
        assert!((poses[1].orientation[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!(parse_poses("0 0 0 2 1 0 0\n".as_bytes()).is_err());
    }
}
