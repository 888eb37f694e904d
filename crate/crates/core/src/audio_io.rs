//! WAV reading and writing.
//!
//! Samples are held deinterleaved as `(channel, sample)` reals in `[-1, 1]`.
//! PCM16 is scaled by 1/32768 on read; writes clamp into range, reads reject
//! out-of-range float data.

use std::io::ErrorKind;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Array2<f64>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Array2<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::InvalidConfig("audio buffer needs at least one channel".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate_hz,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let len = samples.len();
        AudioBuffer::new(
            Array2::from_shape_vec((1, len), samples).expect("one row"),
            sample_rate_hz,
        )
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn num_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, m: usize) -> Vec<f64> {
        self.samples.row(m).to_vec()
    }

    /// Errors unless the buffer is at `rate`; no resampling is done.
    pub fn expect_rate(self, rate: u32) -> Result<Self> {
        if self.sample_rate_hz != rate {
            return Err(Error::SampleRateMismatch {
                expected: rate,
                got: self.sample_rate_hz,
            });
        }
        Ok(self)
    }
}

fn map_read_error(path: &Path, err: hound::Error) -> Error {
    match err {
        // hound signals a short data chunk with a custom "Failed to read
        // enough bytes" error rather than UnexpectedEof.
        hound::Error::IoError(e)
            if e.kind() == ErrorKind::UnexpectedEof || e.to_string().contains("enough bytes") =>
        {
            Error::TruncatedData
        }
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(msg) => Error::MalformedHeader(msg.to_string()),
        hound::Error::TooWide | hound::Error::Unsupported => {
            Error::UnsupportedCodec("unsupported WAV encoding".into())
        }
        hound::Error::UnfinishedSample => Error::TruncatedData,
        other => Error::MalformedHeader(other.to_string()),
    }
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| map_read_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedHeader("zero channels".into()));
    }
    let declared = reader.len() as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_read_error(path, e))?,
        (hound::SampleFormat::Float, 32) => {
            let values: Vec<f32> = reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_read_error(path, e))?;
            if let Some(bad) = values.iter().find(|v| !(v.abs() <= 1.0)) {
                return Err(Error::SampleOutOfRange(*bad));
            }
            values.into_iter().map(f64::from).collect()
        }
        (format, bits) => {
            return Err(Error::UnsupportedCodec(format!("{format:?} at {bits} bits")));
        }
    };
    if interleaved.len() != declared || declared % channels != 0 {
        return Err(Error::TruncatedData);
    }
    let frames = declared / channels;
    let samples = Array2::from_shape_fn((channels, frames), |(c, t)| interleaved[t * channels + c]);
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn write_wav(buffer: &AudioBuffer, path: &Path, format: SampleFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: buffer.num_channels() as u16,
        sample_rate: buffer.sample_rate_hz,
        bits_per_sample: bits,
        sample_format,
    };
    let write_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::InvalidConfig(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for t in 0..buffer.len() {
        for c in 0..buffer.num_channels() {
            let v = buffer.samples[[c, t]].clamp(-1.0, 1.0);
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(write_err)?;
                }
                SampleFormat::Float32 => writer.write_sample(v as f32).map_err(write_err)?,
            }
        }
    }
    writer.finalize().map_err(write_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn f32_exact(len: usize, channels: usize) -> Array2<f64> {
        Array2::from_shape_fn((channels, len), |(c, t)| {
            (((t * 7919 + c * 104_729) % 2001) as f32 / 1000.0 - 1.0) as f64
        })
    }

    #[test]
    fn float32_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let buf = AudioBuffer::new(f32_exact(1000, 3), 16_000).unwrap();
        write_wav(&buf, &path, SampleFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, buf);
        assert_eq!(back.num_channels(), 3);
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let buf = AudioBuffer::mono(vec![0.5, -1.0, 1.0, 0.25, 2.0], 16_000).unwrap();
        write_wav(&buf, &path, SampleFormat::Pcm16).unwrap();
        let raw: Vec<i16> = hound::WavReader::open(&path)
            .unwrap()
            .into_samples::<i16>()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(raw, vec![16384, -32768, 32767, 8192, 32767]);
        let back = read_wav(&path).unwrap();
        assert_eq!(back.channel(0)[1], -1.0);
        assert_eq!(back.channel(0)[0], 0.5);
        for (a, b) in back.channel(0).iter().zip([0.5, -1.0, 1.0, 0.25, 1.0]) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn empty_buffer_is_valid_wav() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        let buf = AudioBuffer::new(Array2::zeros((2, 0)), 16_000).unwrap();
        write_wav(&buf, &path, SampleFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.num_channels(), 2);
        assert!(back.is_empty());
    }

    #[test]
    fn out_of_range_float_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(1.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::SampleOutOfRange(v)) if v == 1.5));
    }

    #[test]
    fn unsupported_and_malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedCodec(_))));

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"RIFX0000WAVEjunk").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn truncated_data_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let buf = AudioBuffer::mono(vec![0.1; 100], 16_000).unwrap();
        write_wav(&buf, &path, SampleFormat::Pcm16).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&bytes[..bytes.len() - 51]).unwrap();
        drop(f);
        let r = read_wav(&path);
        assert!(matches!(r, Err(Error::TruncatedData)), "{r:?}");
    }

    #[test]
    fn rate_mismatch() {
        let buf = AudioBuffer::mono(vec![0.0; 4], 8_000).unwrap();
        assert!(matches!(
            buf.expect_rate(16_000),
            Err(Error::SampleRateMismatch { expected: 16_000, got: 8_000 })
        ));
    }
}
