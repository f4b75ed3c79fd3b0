//! Embedding providers: external command, HTTP service, and a built-in pixel-grid encoder.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::embedding::PatchEmbeddingSet;
use crate::error::{Error, Result};

/// Turns a raster image into a patch-embedding set. Failures are infrastructure errors.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable name recorded next to every reward.
    fn identity(&self) -> String;
    fn embed(&self, image: &Path) -> Result<PatchEmbeddingSet>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// `argv` may use `{image}` and `{output}`; the command writes a PATCHEMB file to `{output}`.
    Command {
        argv: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_s: u64,
    },
    /// POST `{"image": <base64>, "media_type": "image/png"}`, reply `{"embeddings": <base64 PATCHEMB>}`.
    Http {
        url: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_s: u64,
    },
    Grid {
        #[serde(default = "default_grid")]
        grid: u32,
    },
}

fn default_timeout() -> u64 {
    60
}

fn default_grid() -> u32 {
    8
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Grid { grid: default_grid() }
    }
}

impl ProviderConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut p = Vec::new();
        match self {
            ProviderConfig::Command { argv, timeout_s } => {
                if argv.is_empty() {
                    p.push(format!("{prefix}.argv must not be empty"));
                }
                if !argv.iter().any(|a| a.contains("{output}")) {
                    p.push(format!("{prefix}.argv must contain an {{output}} placeholder"));
                }
                if *timeout_s == 0 {
                    p.push(format!("{prefix}.timeout_s must be > 0"));
                }
            }
            ProviderConfig::Http { url, timeout_s, .. } => {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    p.push(format!("{prefix}.url must be an http(s) URL"));
                }
                if *timeout_s == 0 {
                    p.push(format!("{prefix}.timeout_s must be > 0"));
                }
            }
            ProviderConfig::Grid { grid } => {
                if *grid == 0 || *grid > 64 {
                    p.push(format!("{prefix}.grid must be in 1..=64"));
                }
            }
        }
        p
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let problems = self.problems("embedding");
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(match self.clone() {
            ProviderConfig::Command { argv, timeout_s } => Box::new(CommandProvider {
                argv,
                timeout: Duration::from_secs(timeout_s),
            }),
            ProviderConfig::Http {
                url,
                api_key_env,
                timeout_s,
            } => Box::new(HttpProvider::new(url, api_key_env, Duration::from_secs(timeout_s))?),
            ProviderConfig::Grid { grid } => Box::new(GridProvider { grid }),
        })
    }
}

pub struct CommandProvider {
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl EmbeddingProvider for CommandProvider {
    fn identity(&self) -> String {
        format!("command:{}", self.argv.first().map_or("", String::as_str))
    }

    fn embed(&self, image: &Path) -> Result<PatchEmbeddingSet> {
        let infra = |m: String| Error::Infrastructure(format!("embedding command: {m}"));
        let dir = tempfile::tempdir()?;
        let out = dir.path().join("embedding.bin");
        let argv: Vec<String> = self
            .argv
            .iter()
            .map(|a| {
                a.replace("{image}", &image.to_string_lossy())
                    .replace("{output}", &out.to_string_lossy())
            })
            .collect();
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| infra(format!("cannot start {}: {e}", argv[0])))?;
        let status = match child.wait_timeout(self.timeout)? {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(infra(format!("timed out after {:?}", self.timeout)));
            }
        };
        if !status.success() {
            return Err(infra(format!("exited with {status}")));
        }
        let bytes = std::fs::read(&out).map_err(|e| infra(format!("no output file: {e}")))?;
        PatchEmbeddingSet::from_bytes(&bytes).map_err(|e| infra(e.to_string()))
    }
}

pub struct HttpProvider {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(url: String, api_key_env: Option<String>, timeout: Duration) -> Result<Self> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(&var)
                    .map_err(|_| Error::Config(vec![format!("environment variable {var} is not set")]))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpProvider { url, api_key, agent })
    }
}

#[derive(Deserialize)]
struct HttpReply {
    embeddings: String,
}

impl EmbeddingProvider for HttpProvider {
    fn identity(&self) -> String {
        format!("http:{}", self.url)
    }

    fn embed(&self, image: &Path) -> Result<PatchEmbeddingSet> {
        let infra = |m: String| Error::Infrastructure(format!("embedding service: {m}"));
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = serde_json::json!({
            "image": b64.encode(std::fs::read(image)?),
            "media_type": "image/png",
        });
        let mut req = self.agent.post(&self.url);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| infra(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(infra(format!("HTTP {status}")));
        }
        let reply: HttpReply = resp.body_mut().read_json().map_err(|e| infra(e.to_string()))?;
        let bytes = b64.decode(reply.embeddings).map_err(|e| infra(e.to_string()))?;
        PatchEmbeddingSet::from_bytes(&bytes).map_err(|e| infra(e.to_string()))
    }
}

/// Deterministic stand-in encoder: one patch per grid cell, holding a 4x4 darkness
/// thumbnail, two colour offsets and a constant bias so blank cells stay non-zero.
pub struct GridProvider {
    pub grid: u32,
}

pub const GRID_DIM: usize = 19;

fn decode_rgb(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<[f64; 3]>), String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let channels = info.color_type.samples();
    let px = buf[..info.buffer_size()]
        .chunks_exact(channels)
        .map(|p| {
            let (rgb, a) = match channels {
                1 => ([p[0]; 3], 255),
                2 => ([p[0]; 3], p[1]),
                3 => ([p[0], p[1], p[2]], 255),
                _ => ([p[0], p[1], p[2]], p[3]),
            };
            let a = a as f64 / 255.0;
            rgb.map(|c| (c as f64 / 255.0) * a + (1.0 - a))
        })
        .collect();
    Ok((info.width as usize, info.height as usize, px))
}

impl GridProvider {
    pub fn embed_png(&self, bytes: &[u8]) -> Result<PatchEmbeddingSet> {
        let (w, h, px) = decode_rgb(bytes).map_err(|e| Error::Infrastructure(format!("grid encoder: {e}")))?;
        if w == 0 || h == 0 {
            return Err(Error::Infrastructure("grid encoder: empty image".into()));
        }
        let g = self.grid as usize;
        let mut data = Vec::with_capacity(g * g * GRID_DIM);
        for gy in 0..g {
            for gx in 0..g {
                let mut thumb = [0.0f64; 16];
                let mut counts = [0usize; 16];
                let (mut rg, mut bg, mut n) = (0.0, 0.0, 0usize);
                let (x0, x1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1).min(w));
                let (y0, y1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1).min(h));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let [r, gr, b] = px[y * w + x];
                        let sub = ((y - y0) * 4 / (y1 - y0)) * 4 + (x - x0) * 4 / (x1 - x0);
                        thumb[sub] += 1.0 - (r + gr + b) / 3.0;
                        counts[sub] += 1;
                        rg += r - gr;
                        bg += b - gr;
                        n += 1;
                    }
                }
                data.push(0.05);
                for (t, c) in thumb.iter().zip(counts) {
                    data.push(if c == 0 { 0.0 } else { t / c as f64 });
                }
                data.push(rg / n.max(1) as f64);
                data.push(bg / n.max(1) as f64);
            }
        }
        PatchEmbeddingSet::from_flat(g * g, GRID_DIM, data)
    }
}

impl EmbeddingProvider for GridProvider {
    fn identity(&self) -> String {
        format!("grid-pixel:{}", self.grid)
    }

    fn embed(&self, image: &Path) -> Result<PatchEmbeddingSet> {
        let bytes = std::fs::read(image).map_err(|e| Error::Infrastructure(format!("grid encoder: {e}")))?;
        self.embed_png(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
        let f = &f;
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w, h);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut wr = enc.write_header().unwrap();
            let data: Vec<u8> = (0..h).flat_map(|y| (0..w).flat_map(move |x| f(x, y))).collect();
            wr.write_image_data(&data).unwrap();
        }
        out
    }

    #[test]
    fn grid_shapes_and_determinism() {
        let p = GridProvider { grid: 4 };
        let img = png(40, 30, |x, _| if x < 20 { [0, 0, 0] } else { [255, 255, 255] });
        let a = p.embed_png(&img).unwrap();
        assert_eq!((a.len(), a.dim()), (16, GRID_DIM));
        assert_eq!(a, p.embed_png(&img).unwrap());
        assert_eq!(a.patch(0)[1], 1.0);
        assert_eq!(a.patch(3)[1], 0.0);
    }

    #[test]
    fn tiny_images_still_cover_every_cell() {
        let p = GridProvider { grid: 8 };
        let a = p.embed_png(&png(3, 2, |_, _| [10, 10, 10])).unwrap();
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn command_provider_reads_output() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("e.bin");
        PatchEmbeddingSet::new(vec![vec![1.0, 2.0]]).unwrap().write(&src).unwrap();
        let p = CommandProvider {
            argv: vec!["cp".into(), src.to_string_lossy().into(), "{output}".into()],
            timeout: Duration::from_secs(5),
        };
        assert_eq!(p.embed(Path::new("unused.png")).unwrap().dim(), 2);
        let bad = CommandProvider {
            argv: vec!["false".into(), "{output}".into()],
            timeout: Duration::from_secs(5),
        };
        assert!(matches!(bad.embed(Path::new("x.png")), Err(Error::Infrastructure(_))));
    }

    #[test]
    fn config_problems() {
        let c = ProviderConfig::Command { argv: vec![], timeout_s: 0 };
        assert_eq!(c.problems("e").len(), 3);
        assert!(ProviderConfig::default().problems("e").is_empty());
        let c: ProviderConfig = toml::from_str("kind = \"http\"\nurl = \"ftp://x\"").unwrap();
        assert_eq!(c.problems("e").len(), 1);
    }
}
