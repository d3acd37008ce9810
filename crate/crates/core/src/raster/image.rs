use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, stored row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map_values(&mut self, mut f: impl FnMut(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn rotate_180(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, self.height - 1 - y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear resize on pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let (a, b, c, d) = (
                    self.pixel(x0, y0),
                    self.pixel(x1, y0),
                    self.pixel(x0, y1),
                    self.pixel(x1, y1),
                );
                let mut rgb = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] + tx * (b[k] - a[k]);
                    let bot = c[k] + tx * (d[k] - c[k]);
                    rgb[k] = top + ty * (bot - top);
                }
                out.set_pixel(x, y, rgb);
            }
        }
        out
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Image> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic `{}`", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("PPM header `{s}`: {e}")))
        };
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max == 0 || max > 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {max}")));
        }
        let mut bytes = vec![0u8; w * h * 3];
        r.read_exact(&mut bytes)?;
        let data = bytes.iter().map(|&b| b as f64 / max as f64).collect();
        Image::from_data(w, h, data)
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        Image::read_ppm(std::fs::File::open(path)?)
    }
}
