//! `SPC1` binary point clouds: magic `SPC1`, little-endian `u32` N and D,
//! then N·D little-endian `f32` values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPC1";

pub fn write<W: Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(cloud.dim() as u32).to_le_bytes())?;
    for &v in cloud.points().data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("SPC1: truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("SPC1: bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("SPC1: truncated header".into()))?;
        Ok(u32::from_le_bytes(word))
    };
    let n = next_u32(&mut r)? as usize;
    let d = next_u32(&mut r)? as usize;
    let mut bytes = vec![0u8; n * d * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("SPC1: expected {} values", n * d)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    PointCloud::new(Tensor::new(vec![n, d], data)?)
}

pub fn write_file(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write(cloud, BufWriter::new(File::create(path)?))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        let data: Vec<f64> = (0..24).map(|i| (i as f32 * 0.37 - 3.1) as f64).collect();
        PointCloud::new(Tensor::new(vec![4, 6], data).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32_values() {
        let c = cloud();
        let mut buf = Vec::new();
        write(&c, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 24 * 4);
        assert_eq!(&buf[..4], b"SPC1");
        assert_eq!(&buf[4..8], &4u32.to_le_bytes());
        let back = read(&buf[..]).unwrap();
        let bits = |c: &PointCloud| c.points().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let mut buf = Vec::new();
        write(&cloud(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read(&bad[..]), Err(Error::Format(m)) if m.contains("magic")));
        assert!(read(&buf[..buf.len() - 1]).is_err());
    }
}
