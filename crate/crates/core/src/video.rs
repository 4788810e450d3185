//! Frame containers shared by the generator, motion compensation and the
//! baselines.

use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

const MVF_MAGIC: &[u8; 4] = b"MVF1";
const MVK_MAGIC: &[u8; 4] = b"MVK1";

/// 8-bit video stored frame-major (`T × H × W × C`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Video {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0; frames * height * width * channels],
        }
    }

    pub fn from_frames(frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::param("video needs at least one frame"));
        };
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(frames.len() * h * w * c);
        for f in &frames {
            if (f.height, f.width, f.channels) != (h, w, c) {
                return Err(Error::param("frames differ in shape"));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Self {
            frames: frames.len(),
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Owned copy of frame `t`.
    pub fn frame_owned(&self, t: usize) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.frame(t).to_vec(),
        }
    }

    pub fn set_frame(&mut self, t: usize, f: &Frame) {
        assert_eq!((f.height, f.width, f.channels), (self.height, self.width, self.channels));
        self.frame_mut(t).copy_from_slice(&f.data);
    }

    /// Frames `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Result<Video> {
        if start >= end || end > self.frames {
            return Err(Error::param(format!(
                "window {start}..{end} invalid for {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        Ok(Video {
            frames: end - start,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0);
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// `MVF1`, then H, W, C, T as u32 LE, then the `H × W × C × T`
    /// tensor in row-major order (time varies fastest).
    pub fn to_mvf_bytes(&self) -> Vec<u8> {
        let (t_n, h_n, w_n, c_n) = (self.frames, self.height, self.width, self.channels);
        let mut buf = Vec::with_capacity(20 + self.data.len());
        buf.extend_from_slice(MVF_MAGIC);
        for d in [h_n, w_n, c_n, t_n] {
            binio::put_u32(&mut buf, d as u32);
        }
        let fl = self.frame_len();
        for y in 0..h_n {
            for x in 0..w_n {
                for c in 0..c_n {
                    let off = (y * w_n + x) * c_n + c;
                    buf.extend((0..t_n).map(|t| self.data[t * fl + off]));
                }
            }
        }
        buf
    }

    pub fn from_mvf_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MVF_MAGIC)?;
        let h_n = r.u32()? as usize;
        let w_n = r.u32()? as usize;
        let c_n = r.u32()? as usize;
        let t_n = r.u32()? as usize;
        let total = h_n
            .checked_mul(w_n)
            .and_then(|v| v.checked_mul(c_n))
            .and_then(|v| v.checked_mul(t_n))
            .ok_or_else(|| Error::param("frame dimensions overflow"))?;
        let payload = r.take(total)?;
        r.finish()?;
        let mut v = Video::zeros(t_n, h_n, w_n, c_n);
        let fl = v.frame_len();
        let mut src = payload.iter();
        for y in 0..h_n {
            for x in 0..w_n {
                for c in 0..c_n {
                    let off = (y * w_n + x) * c_n + c;
                    for t in 0..t_n {
                        v.data[t * fl + off] = *src.next().expect("length checked");
                    }
                }
            }
        }
        Ok(v)
    }
}

/// A single `H × W × C` 8-bit frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::param(format!(
                "frame data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }
}

/// Binary `H × W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `true` when every set pixel of `other` is also set here.
    pub fn contains(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a || !b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Binary PGM (P5) rendering, 255 for set pixels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| if v { 255u8 } else { 0 }));
        out
    }
}

/// Per-view keypoint tracks, `K × 2 × T` (x then y), single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrack {
    count: usize,
    frames: usize,
    data: Vec<f32>,
}

impl KeypointTrack {
    /// Build from per-frame point lists (`points[t][k]`).
    pub fn from_frames(points: &[Vec<[f64; 2]>]) -> Result<Self> {
        let frames = points.len();
        let count = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != count) {
            return Err(Error::param("keypoint count differs across frames"));
        }
        let mut data = vec![0f32; count * 2 * frames];
        for (t, pts) in points.iter().enumerate() {
            for (k, p) in pts.iter().enumerate() {
                data[(k * 2) * frames + t] = p[0] as f32;
                data[(k * 2 + 1) * frames + t] = p[1] as f32;
            }
        }
        Ok(Self { count, frames, data })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn point(&self, k: usize, t: usize) -> [f64; 2] {
        [
            self.data[(k * 2) * self.frames + t] as f64,
            self.data[(k * 2 + 1) * self.frames + t] as f64,
        ]
    }

    pub fn at(&self, t: usize) -> Vec<[f64; 2]> {
        (0..self.count).map(|k| self.point(k, t)).collect()
    }

    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::param(format!("window {start}..{end} invalid")));
        }
        let pts: Vec<Vec<[f64; 2]>> = (start..end).map(|t| self.at(t)).collect();
        Self::from_frames(&pts)
    }

    /// `MVK1` + K + T (u32 LE) + `K × 2 × T` f32 LE.
    pub fn to_mvk_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 4 * self.data.len());
        buf.extend_from_slice(MVK_MAGIC);
        binio::put_u32(&mut buf, self.count as u32);
        binio::put_u32(&mut buf, self.frames as u32);
        binio::put_f32s(&mut buf, self.data.iter().copied());
        buf
    }

    pub fn from_mvk_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MVK_MAGIC)?;
        let count = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let data = r.f32s(count * 2 * frames)?;
        r.finish()?;
        Ok(Self { count, frames, data })
    }
}
