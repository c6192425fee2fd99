//! Sound saliency on equirectangular frames and normal-field-of-view
//! camera paths.
//!
//! Column `x` of a `H x 2H` frame sits at longitude `x / W * 360 - 180` and
//! row `y` at latitude `90 - y / H * 180`. Directions use a right-handed
//! frame with `+y` up and longitude 0, latitude 0 along `+z`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{full_resolution_response, ResponseMap};
use crate::audio::{extract_window, AudioClip};
use crate::error::{Error, Result};
use crate::model::{self, TwoStreamParams};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub struct EquirectFrame {
    pub raster: Raster,
    pub timestamp_s: f64,
}

impl EquirectFrame {
    pub fn new(raster: Raster, timestamp_s: f64) -> Result<Self> {
        if raster.width != 2 * raster.height {
            return Err(Error::InvalidArgument(format!(
                "equirectangular frames are 2:1, got {}x{}",
                raster.height, raster.width
            )));
        }
        Ok(Self {
            raster,
            timestamp_s,
        })
    }
}

pub fn pixel_to_lonlat(x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
    (x / width as f64 * 360.0 - 180.0, 90.0 - y / height as f64 * 180.0)
}

pub fn lonlat_to_pixel(lon: f64, lat: f64, width: usize, height: usize) -> (f64, f64) {
    (
        (lon + 180.0) / 360.0 * width as f64,
        (90.0 - lat) / 180.0 * height as f64,
    )
}

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn wrap_longitude(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

fn direction(lon: f64, lat: f64) -> [f64; 3] {
    let (l, p) = (lon.to_radians(), lat.to_radians());
    [p.cos() * l.sin(), p.sin(), p.cos() * l.cos()]
}

fn to_lonlat(d: [f64; 3]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let lat = (d[1] / n).clamp(-1.0, 1.0).asin().to_degrees();
    let lon = d[0].atan2(d[2]).to_degrees();
    (wrap_longitude(lon), lat)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewCenter {
    pub longitude: f64,
    pub latitude: f64,
    pub confidence: f64,
}

impl ViewCenter {
    pub fn new(longitude: f64, latitude: f64, confidence: f64) -> Self {
        Self {
            longitude: wrap_longitude(longitude),
            latitude,
            confidence,
        }
    }
}

/// Great-circle distance in degrees.
pub fn great_circle_deg(a_lon: f64, a_lat: f64, b_lon: f64, b_lat: f64) -> f64 {
    let (a, b) = (direction(a_lon, a_lat), direction(b_lon, b_lat));
    // atan2 form stays accurate for tiny and near-antipodal angles
    let c = cross(a, b);
    let s = dot(c, c).sqrt();
    s.atan2(dot(a, b)).to_degrees()
}

/// Saliency-weighted center. Latitude is the weighted arithmetic mean,
/// longitude the argument of the weighted sum of unit phasors. Returns
/// `None` for an all-zero map.
pub fn weighted_center(map: &ResponseMap) -> Result<Option<ViewCenter>> {
    if map.width != 2 * map.height {
        return Err(Error::InvalidArgument(format!(
            "saliency map must be 2:1, got {}x{}",
            map.height, map.width
        )));
    }
    if map.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("saliency must be finite and nonnegative".into()));
    }
    let (mut mass, mut lat_sum, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0);
    let cols: Vec<(f64, f64)> = (0..map.width)
        .map(|x| {
            let lon = pixel_to_lonlat(x as f64, 0.0, map.width, map.height).0.to_radians();
            (lon.cos(), lon.sin())
        })
        .collect();
    for y in 0..map.height {
        let lat = pixel_to_lonlat(0.0, y as f64, map.width, map.height).1;
        for (x, &(c, s)) in cols.iter().enumerate() {
            let m = map.values[y * map.width + x];
            if m == 0.0 {
                continue;
            }
            mass += m;
            lat_sum += m * lat;
            sx += m * c;
            sy += m * s;
        }
    }
    if mass == 0.0 {
        return Ok(None);
    }
    let lon = sy.atan2(sx).to_degrees();
    Ok(Some(ViewCenter::new(lon, lat_sum / mass, mass)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HoldPolicy {
    /// Zero-confidence frames keep the previous output center.
    #[default]
    HoldPrevious,
    /// Zero-confidence frames are followed like any other.
    Follow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NFoVTrajectory {
    pub centers: Vec<ViewCenter>,
    pub fov_deg: f64,
    pub max_step_deg: f64,
}

/// Moves from `from` toward `to` along the great circle by at most
/// `max_step` degrees.
pub fn step_toward(from: (f64, f64), to: (f64, f64), max_step: f64) -> (f64, f64) {
    let dist = great_circle_deg(from.0, from.1, to.0, to.1);
    if dist <= max_step {
        return (wrap_longitude(to.0), to.1);
    }
    let (a, b) = (direction(from.0, from.1), direction(to.0, to.1));
    let omega = dist.to_radians();
    let t = max_step.to_radians();
    let s = omega.sin();
    let (wa, wb) = if s.abs() < 1e-12 {
        // antipodal: any great circle works; rotate about the local east axis
        let east = [from.0.to_radians().cos(), 0.0, -from.0.to_radians().sin()];
        let up = cross(a, east);
        let d = [
            a[0] * t.cos() + up[0] * t.sin(),
            a[1] * t.cos() + up[1] * t.sin(),
            a[2] * t.cos() + up[2] * t.sin(),
        ];
        return to_lonlat(d);
    } else {
        (((omega - t).sin()) / s, t.sin() / s)
    };
    to_lonlat([
        wa * a[0] + wb * b[0],
        wa * a[1] + wb * b[1],
        wa * a[2] + wb * b[2],
    ])
}

/// Greedy clamped follower: each output moves from the previous output
/// toward the raw center by at most `max_step_deg`. The first output is the
/// first raw center (the origin if that frame has no saliency).
pub fn smooth_trajectory(
    centers: &[ViewCenter],
    max_step_deg: f64,
    hold: HoldPolicy,
    fov_deg: f64,
) -> Result<NFoVTrajectory> {
    if centers.is_empty() {
        return Err(Error::Empty("no view centers to smooth".into()));
    }
    if !(max_step_deg > 0.0) {
        return Err(Error::InvalidArgument("max step must be positive".into()));
    }
    let mut out: Vec<ViewCenter> = Vec::with_capacity(centers.len());
    for c in centers {
        let held = hold == HoldPolicy::HoldPrevious && c.confidence <= 0.0;
        let next = match out.last() {
            None if held => ViewCenter::new(0.0, 0.0, 0.0),
            None => *c,
            Some(prev) if held => ViewCenter {
                confidence: c.confidence,
                ..*prev
            },
            Some(prev) => {
                let (lon, lat) = step_toward(
                    (prev.longitude, prev.latitude),
                    (c.longitude, c.latitude),
                    max_step_deg,
                );
                ViewCenter::new(lon, lat, c.confidence)
            }
        };
        out.push(next);
    }
    Ok(NFoVTrajectory {
        centers: out,
        fov_deg,
        max_step_deg,
    })
}

/// Bilinear sample of an equirectangular raster at fractional pixel
/// coordinates, wrapping horizontally and clamping vertically.
fn sample(frame: &Raster, sx: f64, sy: f64, out: &mut [f64]) {
    let (w, h) = (frame.width as isize, frame.height as isize);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0f = sx.floor();
    let y0f = sy.floor();
    let (fx, fy) = (sx - x0f, sy - y0f);
    let x0 = (x0f as isize).rem_euclid(w) as usize;
    let x1 = (x0f as isize + 1).rem_euclid(w) as usize;
    let y0 = y0f as usize;
    let y1 = (y0 + 1).min(h as usize - 1);
    for (c, o) in out.iter_mut().enumerate() {
        let p = |y: usize, x: usize| frame.get(y, x, c);
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
}

/// Gnomonic (rectilinear) view of an equirectangular frame. Output pixel
/// `(out_h / 2, out_w / 2)` (integer division) looks exactly at `center`; the horizontal field
/// of view spans `fov_deg`.
pub fn render_nfov(
    frame: &Raster,
    center: &ViewCenter,
    fov_deg: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Raster> {
    if !(fov_deg > 0.0 && fov_deg < 120.0) {
        return Err(Error::InvalidArgument(format!("field of view {fov_deg} outside (0, 120)")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("empty output size".into()));
    }
    let f = (out_w as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    let lon0 = wrap_longitude(center.longitude);
    let fwd = direction(lon0, center.latitude);
    let l0 = lon0.to_radians();
    let right = [l0.cos(), 0.0, -l0.sin()];
    let up = cross(fwd, right);
    let ch = frame.channels;
    let mut data = vec![0.0; out_h * out_w * ch];
    let mut px = vec![0.0; ch];
    for i in 0..out_h {
        let yc = i as f64 - (out_h / 2) as f64;
        for j in 0..out_w {
            let xc = j as f64 - (out_w / 2) as f64;
            let d = [
                xc * right[0] - yc * up[0] + f * fwd[0],
                xc * right[1] - yc * up[1] + f * fwd[1],
                xc * right[2] - yc * up[2] + f * fwd[2],
            ];
            let (lon, lat) = to_lonlat(d);
            let (sx, sy) = lonlat_to_pixel(lon, lat, frame.width, frame.height);
            sample(frame, sx, sy, &mut px);
            data[(i * out_w + j) * ch..(i * out_w + j + 1) * ch].copy_from_slice(&px);
        }
    }
    Raster::new(out_h, out_w, ch, data)
}

/// Which grid map feeds the saliency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SaliencySource {
    /// Softmax attention.
    #[default]
    Attention,
    /// Pre-softmax scores.
    Scores,
}

/// Per-frame response maps from each frame and the audio window centered
/// on its timestamp. Frames are processed independently.
pub fn saliency_sequence(
    frames: &[EquirectFrame],
    audio: &AudioClip,
    params: &TwoStreamParams,
    window_s: f64,
    source: SaliencySource,
) -> Result<Vec<ResponseMap>> {
    frames
        .iter()
        .map(|f| {
            let window = extract_window(audio, f.timestamp_s, window_s)?;
            let loc = model::localize(params, &f.raster, &window.samples)?;
            let (h, w) = (f.raster.height, f.raster.width);
            match source {
                SaliencySource::Attention => full_resolution_response(&loc.attention, h, w),
                SaliencySource::Scores => full_resolution_response(&loc.scores, h, w),
            }
        })
        .collect()
}

/// Reads the PNG frames of `dir` in file-name order. Timestamps come from a
/// `{"timestamps": [...]}` JSON file when given, otherwise frame `k` sits at
/// `k * stride_s`.
pub fn load_sequence(dir: impl AsRef<Path>, timing: Option<&Path>, stride_s: f64) -> Result<Vec<EquirectFrame>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no PNG frames in {}", dir.display())));
    }
    let timestamps = match timing {
        Some(t) => {
            if !t.exists() {
                return Err(Error::MissingFile(t.to_path_buf()));
            }
            let parsed: crate::trainer::synthetic::FrameTiming = serde_json::from_slice(&std::fs::read(t)?)?;
            if parsed.timestamps.len() != paths.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} timestamps for {} frames",
                    parsed.timestamps.len(),
                    paths.len()
                )));
            }
            parsed.timestamps
        }
        None => {
            if !(stride_s > 0.0) {
                return Err(Error::InvalidArgument("frame stride must be positive".into()));
            }
            (0..paths.len()).map(|k| k as f64 * stride_s).collect()
        }
    };
    paths
        .iter()
        .zip(timestamps)
        .map(|(p, t)| EquirectFrame::new(crate::raster::load_raster(p)?, t))
        .collect()
}

/// CSV with columns `timestamp,longitude,latitude,confidence`.
pub fn write_trajectory_csv(
    path: impl AsRef<Path>,
    timestamps: &[f64],
    trajectory: &NFoVTrajectory,
) -> Result<()> {
    if timestamps.len() != trajectory.centers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} timestamps for {} centers",
            timestamps.len(),
            trajectory.centers.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "timestamp,longitude,latitude,confidence")?;
    for (t, c) in timestamps.iter().zip(&trajectory.centers) {
        writeln!(f, "{t},{},{},{}", c.longitude, c.latitude, c.confidence)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_with(points: &[(usize, usize, f64)], h: usize) -> ResponseMap {
        let w = 2 * h;
        let mut v = vec![0.0; h * w];
        for &(y, x, m) in points {
            v[y * w + x] = m;
        }
        ResponseMap::new(h, w, v).unwrap()
    }

    fn lon_diff(a: f64, b: f64) -> f64 {
        wrap_longitude(a - b).abs()
    }

    #[test]
    fn delta_mass_recovers_its_pixel() {
        let m = map_with(&[(7, 29, 0.3)], 18);
        let c = weighted_center(&m).unwrap().unwrap();
        let (lon, lat) = pixel_to_lonlat(29.0, 7.0, 36, 18);
        assert!(lon_diff(c.longitude, lon) < 1e-12);
        assert_eq!(c.latitude, lat);
        assert_eq!(c.confidence, 0.3);
        assert!(weighted_center(&map_with(&[], 18)).unwrap().is_none());
    }

    #[test]
    fn seam_and_quadrant_phasors() {
        // 360 columns: column x sits at x - 180 degrees
        let h = 180;
        let y = 90; // latitude 0
        let m = map_with(&[(y, 10, 1.0), (y, 350, 1.0)], h);
        let c = weighted_center(&m).unwrap().unwrap();
        assert!(lon_diff(c.longitude, 180.0) < 1e-9);
        assert_eq!(c.latitude, 0.0);

        let q = map_with(&[(y, 180, 1.0), (y, 270, 1.0)], h);
        let c = weighted_center(&q).unwrap().unwrap();
        assert!((c.longitude - 45.0).abs() < 1e-12);
        assert_eq!(c.latitude, 0.0);
    }

    #[test]
    fn clamped_steps() {
        let start = ViewCenter::new(0.0, 0.0, 1.0);
        let target = ViewCenter::new(40.0, 0.0, 1.0);
        let raw = vec![start, target, target, target, target, target];
        let t = smooth_trajectory(&raw, 10.0, HoldPolicy::HoldPrevious, 65.0).unwrap();
        let lons: Vec<f64> = t.centers.iter().map(|c| c.longitude).collect();
        for (k, want) in [0.0, 10.0, 20.0, 30.0, 40.0, 40.0].iter().enumerate() {
            assert!((lons[k] - want).abs() < 1e-9, "{lons:?}");
        }
        for w in t.centers.windows(2).take(4) {
            let d = great_circle_deg(w[0].longitude, w[0].latitude, w[1].longitude, w[1].latitude);
            assert!((d - 10.0).abs() < 1e-9);
        }

        let fixed = vec![start; 4];
        let t = smooth_trajectory(&fixed, 10.0, HoldPolicy::HoldPrevious, 65.0).unwrap();
        assert_eq!(t.centers, fixed);

        let wander: Vec<_> = (0..6).map(|k| ViewCenter::new(k as f64 * 3.0, 1.0, 1.0)).collect();
        let t = smooth_trajectory(&wander, 10.0, HoldPolicy::HoldPrevious, 65.0).unwrap();
        for (a, b) in t.centers.iter().zip(&wander) {
            assert!(lon_diff(a.longitude, b.longitude) < 1e-12 && a.latitude == b.latitude);
        }
    }

    #[test]
    fn zero_confidence_holds_position() {
        let raw = vec![
            ViewCenter::new(20.0, 5.0, 1.0),
            ViewCenter::new(-90.0, 0.0, 0.0),
            ViewCenter::new(22.0, 5.0, 2.0),
        ];
        let t = smooth_trajectory(&raw, 30.0, HoldPolicy::HoldPrevious, 65.0).unwrap();
        assert_eq!((t.centers[1].longitude, t.centers[1].latitude), (20.0, 5.0));
        assert!((t.centers[2].longitude - 22.0).abs() < 1e-9);
        let f = smooth_trajectory(&raw, 30.0, HoldPolicy::Follow, 65.0).unwrap();
        assert!(lon_diff(f.centers[1].longitude, -10.0) < 1.0);
    }

    #[test]
    fn seam_crossing_takes_the_short_way() {
        let raw = vec![ViewCenter::new(175.0, 0.0, 1.0), ViewCenter::new(-175.0, 0.0, 1.0)];
        let t = smooth_trajectory(&raw, 5.0, HoldPolicy::HoldPrevious, 65.0).unwrap();
        assert!(lon_diff(t.centers[1].longitude, 180.0) < 1e-9);
    }

    fn marker_frame(h: usize) -> Raster {
        let mut r = Raster::filled(h, 2 * h, [0.0, 0.0, 0.0]);
        r.set_rgb(h / 2, h, [1.0, 1.0, 1.0]);
        r
    }

    #[test]
    fn render_centers_the_marker_and_wraps() {
        let frame = marker_frame(90);
        let c = ViewCenter::new(0.0, 0.0, 1.0);
        let out = render_nfov(&frame, &c, 65.0, 41, 61).unwrap();
        let (mut best, mut at) = (0.0, (0, 0));
        for i in 0..41 {
            for j in 0..61 {
                if out.get(i, j, 0) > best {
                    best = out.get(i, j, 0);
                    at = (i, j);
                }
            }
        }
        assert_eq!(at, (20, 30));

        let a = render_nfov(&frame, &ViewCenter { longitude: 30.0, ..c }, 65.0, 20, 30).unwrap();
        let b = render_nfov(&frame, &ViewCenter { longitude: 390.0, ..c }, 65.0, 20, 30).unwrap();
        assert_eq!(a, b);
        assert!(render_nfov(&frame, &c, 0.0, 8, 8).is_err());
        assert!(render_nfov(&frame, &c, 120.0, 8, 8).is_err());
    }

    #[test]
    fn great_circles_render_as_straight_lines() {
        // paint a tilted great circle, then check the rendered pixels are
        // collinear in the crop
        let h = 400;
        let w = 800;
        let mut frame = Raster::filled(h, w, [0.0, 0.0, 0.0]);
        let normal = {
            let n = [0.3f64, 0.8, -0.5];
            let l = dot(n, n).sqrt();
            [n[0] / l, n[1] / l, n[2] / l]
        };
        let e1 = {
            let c = cross(normal, [0.0, 0.0, 1.0]);
            let l = dot(c, c).sqrt();
            [c[0] / l, c[1] / l, c[2] / l]
        };
        let e2 = cross(normal, e1);
        for k in 0..20000 {
            let t = k as f64 / 20000.0 * std::f64::consts::TAU;
            let d = [
                t.cos() * e1[0] + t.sin() * e2[0],
                t.cos() * e1[1] + t.sin() * e2[1],
                t.cos() * e1[2] + t.sin() * e2[2],
            ];
            let (lon, lat) = to_lonlat(d);
            let (x, y) = lonlat_to_pixel(lon, lat, w, h);
            let (x, y) = ((x.round() as usize) % w, (y.round() as usize).min(h - 1));
            frame.set_rgb(y, x, [1.0, 1.0, 1.0]);
        }
        // look at a point on the circle so the line crosses the crop
        let (lon0, lat0) = to_lonlat(e1);
        let out = render_nfov(&frame, &ViewCenter::new(lon0 + 5.0, lat0, 1.0), 90.0, 200, 200).unwrap();
        let pts: Vec<(f64, f64)> = (0..200)
            .flat_map(|i| (0..200).map(move |j| (i, j)))
            .filter(|&(i, j)| out.get(i, j, 0) > 0.5)
            .map(|(i, j)| (j as f64, i as f64))
            .collect();
        assert!(pts.len() > 100, "{}", pts.len());
        let n = pts.len() as f64;
        let (mx, my) = (
            pts.iter().map(|p| p.0).sum::<f64>() / n,
            pts.iter().map(|p| p.1).sum::<f64>() / n,
        );
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for p in &pts {
            sxx += (p.0 - mx) * (p.0 - mx);
            syy += (p.1 - my) * (p.1 - my);
            sxy += (p.0 - mx) * (p.1 - my);
        }
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        let small = tr / 2.0 - ((tr * tr / 4.0) - det).max(0.0).sqrt();
        let rms = (small / n).sqrt();
        assert!(rms < 1.5, "perpendicular spread {rms}");
    }

    proptest! {
        #[test]
        fn column_shift_shifts_longitude(
            pts in prop::collection::vec((0usize..18, 0usize..36, 0.1f64..1.0), 1..6),
            shift in 0usize..36,
        ) {
            let a = map_with(&pts, 18);
            let shifted: Vec<_> = pts.iter().map(|&(y, x, m)| (y, (x + shift) % 36, m)).collect();
            // duplicate coordinates overwrite identically in both maps
            let b = map_with(&shifted, 18);
            let ca = weighted_center(&a).unwrap().unwrap();
            let cb = weighted_center(&b).unwrap().unwrap();
            let resultant = {
                let (mut sx, mut sy) = (0.0, 0.0);
                for (x, m) in a.values.iter().enumerate().map(|(i, m)| (i % 36, m)) {
                    let l = (x as f64 * 10.0 - 180.0).to_radians();
                    sx += m * l.cos();
                    sy += m * l.sin();
                }
                (sx * sx + sy * sy).sqrt()
            };
            prop_assume!(resultant > 1e-6);
            prop_assert!(lon_diff(cb.longitude, ca.longitude + shift as f64 * 10.0) < 10.0);
            prop_assert!((ca.latitude - cb.latitude).abs() < 1e-9);
        }

        #[test]
        fn scale_changes_only_confidence(
            pts in prop::collection::vec((0usize..18, 0usize..36, 0.1f64..1.0), 1..6),
            scale in 0.01f64..100.0,
        ) {
            let a = map_with(&pts, 18);
            let (sx, sy) = a.values.iter().enumerate().fold((0.0, 0.0), |(sx, sy), (i, m)| {
                let l = ((i % 36) as f64 * 10.0 - 180.0).to_radians();
                (sx + m * l.cos(), sy + m * l.sin())
            });
            prop_assume!(sx * sx + sy * sy > 1e-6);
            let b = ResponseMap::new(18, 36, a.values.iter().map(|v| v * scale).collect()).unwrap();
            let ca = weighted_center(&a).unwrap().unwrap();
            let cb = weighted_center(&b).unwrap().unwrap();
            prop_assert!(lon_diff(ca.longitude, cb.longitude) < 1e-6);
            prop_assert!((ca.latitude - cb.latitude).abs() < 1e-9);
            prop_assert!((cb.confidence - scale * ca.confidence).abs() < 1e-9 * cb.confidence.max(1.0));
        }

        #[test]
        fn trajectory_respects_max_step(
            raw in prop::collection::vec((-180.0f64..180.0, -80.0f64..80.0, 0.0f64..1.0), 1..30),
            max_step in 0.5f64..40.0,
        ) {
            let centers: Vec<_> = raw.iter().map(|&(l, p, c)| ViewCenter::new(l, p, c)).collect();
            let t = smooth_trajectory(&centers, max_step, HoldPolicy::HoldPrevious, 65.0).unwrap();
            for w in t.centers.windows(2) {
                let d = great_circle_deg(w[0].longitude, w[0].latitude, w[1].longitude, w[1].latitude);
                prop_assert!(d <= max_step + 1e-9, "{} > {}", d, max_step);
            }
        }
    }
}
