use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{render_projection, DetectorSpec, FieldSampler, MovieSampler, ProjectionImage};
use crate::container::{self, Dtype};
use crate::domain::{DomainSpec, MaterialPair};
use crate::error::{Error, Result};
use crate::fluidsim::Movie4D;

pub const DATASET_FORMAT_TAG: &str = "pionix-projections";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub angles_deg: Vec<f64>,
    /// Timestamps of the recorded frames in seconds.
    pub frame_times: Vec<f64>,
    /// Index of each recorded frame in the full-domain frame sequence.
    pub frame_indices: Vec<usize>,
    pub detector: DetectorSpec,
    pub domain: DomainSpec,
    pub dtype: Dtype,
    pub channels: Vec<String>,
}

impl DatasetManifest {
    pub fn projection_file(view: usize, frame: usize) -> String {
        format!("proj_{view}_{frame:04}.bin")
    }

    pub fn phase_file(view: usize, frame: usize) -> String {
        format!("phase_{view}_{frame:04}.bin")
    }
}

/// Measured projections at a few fixed views for a set of frames. Every
/// pixel read goes through an accessor that counts it.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `images[frame][view]`.
    images: Vec<Vec<ProjectionImage>>,
    reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            manifest: self.manifest.clone(),
            images: self.images.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.images == other.images
    }
}

fn quantize(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

impl Dataset {
    /// Renders every frame of `movie` at each angle. Values are rounded to
    /// single precision, the on-disk format.
    pub fn from_movie(movie: &Movie4D, materials: &MaterialPair, angles_deg: &[f64], detector: &DetectorSpec) -> Result<Dataset> {
        let sampler = MovieSampler::new(movie, materials);
        Self::from_sampler(&sampler, &movie.spec, &movie.times(), &movie.frame_indices, angles_deg, detector)
    }

    /// Renders an arbitrary scene at the given frame times.
    pub fn from_sampler<S: FieldSampler + ?Sized>(
        sampler: &S,
        domain: &DomainSpec,
        times: &[f64],
        frame_indices: &[usize],
        angles_deg: &[f64],
        detector: &DetectorSpec,
    ) -> Result<Dataset> {
        detector.validate()?;
        if angles_deg.is_empty() {
            return Err(Error::Usage("at least one view angle is required".into()));
        }
        if times.len() != frame_indices.len() || times.is_empty() {
            return Err(Error::Usage("need one frame index per frame time".into()));
        }
        let mut images = Vec::with_capacity(times.len());
        for &t in times {
            let mut views = Vec::with_capacity(angles_deg.len());
            for &a in angles_deg {
                let mut img = render_projection(sampler, a, t, detector)?;
                quantize(&mut img.transmission);
                if let Some(p) = img.phase.as_mut() {
                    quantize(p);
                }
                views.push(img);
            }
            images.push(views);
        }
        let mut channels = vec!["transmission".to_string()];
        if detector.phase_channel {
            channels.push("phase".into());
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                format: DATASET_FORMAT_TAG.into(),
                angles_deg: angles_deg.to_vec(),
                frame_times: times.to_vec(),
                frame_indices: frame_indices.to_vec(),
                detector: detector.clone(),
                domain: domain.clone(),
                dtype: Dtype::F32Le,
                channels,
            },
            images,
            reads: AtomicU64::new(0),
        })
    }

    /// Overwrites one measured image; for fault-injection tests.
    #[doc(hidden)]
    pub fn replace_image(&mut self, frame: usize, view: usize, transmission: Vec<f64>) {
        self.images[frame][view].transmission = transmission;
    }

    pub fn frame_count(&self) -> usize {
        self.images.len()
    }

    pub fn view_count(&self) -> usize {
        self.manifest.angles_deg.len()
    }

    pub fn angle(&self, view: usize) -> f64 {
        self.manifest.angles_deg[view]
    }

    pub fn time(&self, frame: usize) -> f64 {
        self.manifest.frame_times[frame]
    }

    pub fn detector(&self) -> &DetectorSpec {
        &self.manifest.detector
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.manifest.domain
    }

    /// Measured transmission at one pixel (row-major index).
    pub fn measured(&self, frame: usize, view: usize, pixel: usize) -> f64 {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.images[frame][view].transmission[pixel]
    }

    /// A whole measured image; counts every pixel as read.
    pub fn image(&self, frame: usize, view: usize) -> &ProjectionImage {
        let img = &self.images[frame][view];
        self.reads.fetch_add(img.transmission.len() as u64, Ordering::Relaxed);
        img
    }

    /// Number of measured pixel values handed out so far.
    pub fn pixel_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Every `stride`-th frame starting with the first.
    pub fn subsample(&self, stride: usize) -> Result<Dataset> {
        if stride == 0 {
            return Err(Error::Usage("stride must be positive".into()));
        }
        let keep: Vec<usize> = (0..self.frame_count()).step_by(stride).collect();
        let mut manifest = self.manifest.clone();
        manifest.frame_times = keep.iter().map(|&f| self.manifest.frame_times[f]).collect();
        manifest.frame_indices = keep.iter().map(|&f| self.manifest.frame_indices[f]).collect();
        Ok(Dataset {
            manifest,
            images: keep.iter().map(|&f| self.images[f].clone()).collect(),
            reads: AtomicU64::new(0),
        })
    }

    /// Drops all but the listed views.
    pub fn select_views(&self, views: &[usize]) -> Result<Dataset> {
        if views.is_empty() || views.iter().any(|&v| v >= self.view_count()) {
            return Err(Error::Usage(format!("invalid view selection {views:?}")));
        }
        let mut manifest = self.manifest.clone();
        manifest.angles_deg = views.iter().map(|&v| self.manifest.angles_deg[v]).collect();
        Ok(Dataset {
            manifest,
            images: self
                .images
                .iter()
                .map(|fr| views.iter().map(|&v| fr[v].clone()).collect())
                .collect(),
            reads: AtomicU64::new(0),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (f, views) in self.images.iter().enumerate() {
            for (v, img) in views.iter().enumerate() {
                container::write_raw(&dir.join(DatasetManifest::projection_file(v, f)), &img.transmission, Dtype::F32Le)?;
                if let Some(p) = &img.phase {
                    container::write_raw(&dir.join(DatasetManifest::phase_file(v, f)), p, Dtype::F32Le)?;
                }
            }
        }
        container::write_json(&dir.join(container::MANIFEST), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(container::MANIFEST);
        let m: DatasetManifest = container::read_json(&path)?;
        if m.format != DATASET_FORMAT_TAG {
            return Err(Error::format(&path, format!("unknown format tag {:?}", m.format)));
        }
        if m.frame_times.len() != m.frame_indices.len() || m.angles_deg.is_empty() {
            return Err(Error::format(&path, "inconsistent frame or view lists"));
        }
        m.detector.validate()?;
        m.domain.validate()?;
        let det = &m.detector;
        let phase = m.channels.iter().any(|c| c == "phase");
        let mut images = Vec::with_capacity(m.frame_times.len());
        for (f, &t) in m.frame_times.iter().enumerate() {
            let mut views = Vec::with_capacity(m.angles_deg.len());
            for (v, &a) in m.angles_deg.iter().enumerate() {
                let transmission = container::read_raw(&dir.join(DatasetManifest::projection_file(v, f)), det.pixel_count(), m.dtype)?;
                let phase = if phase {
                    Some(container::read_raw(&dir.join(DatasetManifest::phase_file(v, f)), det.pixel_count(), m.dtype)?)
                } else {
                    None
                };
                views.push(ProjectionImage {
                    width: det.width,
                    height: det.height,
                    transmission,
                    phase,
                    angle_deg: a,
                    t,
                    pixel_pitch: det.pixel_pitch,
                });
            }
            images.push(views);
        }
        Ok(Dataset {
            manifest: m,
            images,
            reads: AtomicU64::new(0),
        })
    }
}
