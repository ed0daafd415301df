//! Immutable decomposition sessions in a TTL-bounded LRU cache.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lru::LruCache;
use relit_core::io::{encode_linear_png, BitDepth};
use relit_core::render::{render, shading};
use relit_core::{ColorSpace, ImagePlane, Mask, NormalMap, ShLighting};

use crate::error::ApiResult;

pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

/// Decomposition of one upload plus its preview PNGs. Never mutated after
/// insertion, so handlers share it through an `Arc`.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub albedo: ImagePlane,
    pub normals: NormalMap,
    pub mask: Mask,
    pub light: ShLighting,
    pub albedo_png: Vec<u8>,
    pub normals_png: Vec<u8>,
    pub shading_png: Vec<u8>,
    pub reconstruction_png: Vec<u8>,
    created: Instant,
}

/// Relit image as 8-bit sRGB PNG. The reconstruction preview goes through
/// the same path so relighting with the session's own light is byte-equal.
pub fn relight_png(albedo: &ImagePlane, normals: &NormalMap, light: &ShLighting, mask: &Mask) -> ApiResult<Vec<u8>> {
    Ok(encode_linear_png(&render(albedo, normals, light, mask)?, BitDepth::Eight)?)
}

fn normals_display_png(normals: &NormalMap, mask: &Mask) -> ApiResult<Vec<u8>> {
    let (w, h) = (normals.width(), normals.height());
    let shown = ImagePlane::from_fn_rgb(w, h, ColorSpace::Srgb, |x, y| {
        if mask.at(x, y) {
            normals.get(y * w + x).map(|v| (v + 1.0) / 2.0)
        } else {
            [0.0; 3]
        }
    })?;
    Ok(relit_core::io::encode_srgb_png(&shown, BitDepth::Eight)?)
}

impl Session {
    pub fn new(albedo: ImagePlane, normals: NormalMap, mask: Mask, light: ShLighting) -> ApiResult<Self> {
        let albedo = albedo.masked(&mask);
        let shade = shading(&normals, &light, &mask)?.retag(ColorSpace::LinearRgb)?;
        Ok(Self {
            id: uuid::Uuid::new_v4().simple().to_string(),
            albedo_png: encode_linear_png(&albedo, BitDepth::Eight)?,
            normals_png: normals_display_png(&normals, &mask)?,
            shading_png: encode_linear_png(&shade, BitDepth::Eight)?,
            reconstruction_png: relight_png(&albedo, &normals, &light, &mask)?,
            albedo,
            normals,
            mask,
            light,
            created: Instant::now(),
        })
    }

    pub fn relight(&self, light: &ShLighting) -> ApiResult<Vec<u8>> {
        relight_png(&self.albedo, &self.normals, light, &self.mask)
    }

    pub fn image(&self, name: &str) -> Option<&[u8]> {
        match name {
            "albedo" => Some(&self.albedo_png),
            "normals" => Some(&self.normals_png),
            "shading" => Some(&self.shading_png),
            "reconstruction" => Some(&self.reconstruction_png),
            _ => None,
        }
    }
}

pub struct SessionCache {
    entries: Mutex<LruCache<String, Arc<Session>>>,
    ttl: Duration,
}

impl SessionCache {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is positive");
        Self {
            entries: Mutex::new(LruCache::new(cap)),
            ttl,
        }
    }

    pub fn insert(&self, session: Session) -> Arc<Session> {
        let s = Arc::new(session);
        self.entries
            .lock()
            .expect("session cache lock")
            .put(s.id.clone(), Arc::clone(&s));
        s
    }

    /// Live session by id; expired entries are dropped on lookup.
    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        let mut entries = self.entries.lock().expect("session cache lock");
        let s = entries.get(id)?;
        if s.created.elapsed() > self.ttl {
            entries.pop(id);
            return None;
        }
        Some(Arc::clone(s))
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("session cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for SessionCache {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, DEFAULT_TTL)
    }
}
