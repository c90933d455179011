//! 8-bit RGB images with binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad PPM: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Encodes as P6; each comment becomes a `# ...` header line.
    pub fn to_ppm(&self, comments: &[String]) -> Vec<u8> {
        let mut out = b"P6\n".to_vec();
        for c in comments {
            out.extend_from_slice(format!("# {}\n", c.replace('\n', " ")).as_bytes());
        }
        out.extend_from_slice(format!("{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Format("header ended early".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(ImageError::Format(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| ImageError::Format(format!("{s:?}: {e}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(ImageError::Format(format!("maxval {maxval}")));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height * 3;
        let data = bytes
            .get(pos..pos + need)
            .ok_or_else(|| ImageError::Format(format!("expected {need} pixel bytes")))?
            .to_vec();
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_ppm(&bytes)
    }

    pub fn write(&self, path: &Path, comments: &[String]) -> Result<(), ImageError> {
        fs::write(path, self.to_ppm(comments)).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// `(1, 3, H, W)` tensor scaled to [0, 1].
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut v = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                v[c * plane + i] = T::from_f64(px[c] as f64 / 255.0);
            }
        }
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), v).expect("sized above")
    }
}
