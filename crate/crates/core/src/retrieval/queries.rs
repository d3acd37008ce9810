//! JSON-lines file of embedded query photos.

use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::{file_degrees, ImageRef, PhotoRecord};
use crate::error::{Error, Result};
use crate::geodesy::GeoPoint;
use crate::model::Embedding;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    /// Ground-truth camera location.
    pub location: GeoPoint,
    pub captured_at: Option<DateTime<Utc>>,
    pub embedding: Embedding,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    captured_at: Option<String>,
    embedding: Vec<f64>,
}

impl QueryRecord {
    pub fn new(photo: &PhotoRecord, embedding: Embedding) -> Self {
        Self {
            id: photo.id.clone(),
            location: photo.location,
            captured_at: photo.captured_at,
            embedding,
        }
    }

    /// The photo fields needed by grouped recall; the image is not kept.
    pub fn to_photo(&self) -> PhotoRecord {
        PhotoRecord {
            id: self.id.clone(),
            location: self.location,
            captured_at: self.captured_at,
            image: ImageRef::Path(Default::default()),
        }
    }
}

pub fn write_queries<W: Write>(mut w: W, queries: &[QueryRecord]) -> Result<()> {
    for q in queries {
        let line = Line {
            id: q.id.clone(),
            lat: file_degrees(q.location.lat),
            lon: file_degrees(q.location.lon),
            captured_at: q.captured_at.map(|t| t.to_rfc3339()),
            embedding: q.embedding.as_slice().to_vec(),
        };
        let json = serde_json::to_string(&line)
            .map_err(|e| Error::Format(format!("query `{}`: {e}", q.id)))?;
        writeln!(w, "{json}")?;
    }
    Ok(())
}

/// Reads every line; unlike manifests, a malformed line is an error.
pub fn read_queries<R: BufRead>(r: R) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("query line {}: {e}", n + 1)))?;
        let captured_at = raw
            .captured_at
            .map(|t| {
                DateTime::parse_from_rfc3339(&t)
                    .map(|t| t.with_timezone(&Utc))
                    .map_err(|e| Error::Format(format!("query line {}: {e}", n + 1)))
            })
            .transpose()?;
        let location = GeoPoint::from_degrees(raw.lat, raw.lon);
        if !location.is_valid() {
            return Err(Error::Format(format!("query line {}: invalid location", n + 1)));
        }
        let embedding = Embedding::from_unit(raw.embedding);
        if embedding.is_empty() || (embedding.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!("query line {}: embedding is not unit length", n + 1)));
        }
        out.push(QueryRecord {
            id: raw.id,
            location,
            captured_at,
            embedding,
        });
    }
    Ok(out)
}
