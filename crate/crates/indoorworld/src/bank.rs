//! `JRTHOUSE v1` house bank files.
//!
//! Layout after the `JRTHOUSE v1\n` line, all integers little-endian:
//! u32 house count, then per house
//! `u8 domain, u64 seed, u32 width, u32 height, width*height grid bytes
//! (0 wall, 1 floor), u32 rooms, rooms x (u32 x, y, w, h, u8 type),
//! u32 doors, doors x (u32 a, b, cx, cy)`.

use std::fs;
use std::path::Path;

use crate::error::{Result, WorldError};
use crate::house::{Domain, Door, HousePlan, Rect, Room, RoomType};

pub const HOUSE_MAGIC: &str = "JRTHOUSE v1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn houses_to_bytes(houses: &[HousePlan]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HOUSE_MAGIC.as_bytes());
    out.push(b'\n');
    put_u32(&mut out, houses.len());
    for h in houses {
        out.push(h.domain.tag());
        out.extend_from_slice(&h.seed.to_le_bytes());
        put_u32(&mut out, h.width);
        put_u32(&mut out, h.height);
        for y in 0..h.height {
            for x in 0..h.width {
                out.push(h.is_floor(x as i64, y as i64) as u8);
            }
        }
        put_u32(&mut out, h.rooms.len());
        for r in &h.rooms {
            for v in [r.rect.x, r.rect.y, r.rect.w, r.rect.h] {
                put_u32(&mut out, v);
            }
            out.push(r.room_type.index() as u8);
        }
        put_u32(&mut out, h.doors.len());
        for d in &h.doors {
            for v in [d.a, d.b, d.cell.0, d.cell.1] {
                put_u32(&mut out, v);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WorldError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn houses_from_bytes(bytes: &[u8]) -> Result<Vec<HousePlan>> {
    let fmt_err = |m: String| WorldError::Format(m);
    let head = HOUSE_MAGIC.len() + 1;
    if bytes.len() < head || &bytes[..head - 1] != HOUSE_MAGIC.as_bytes() || bytes[head - 1] != b'\n' {
        return Err(fmt_err("missing JRTHOUSE v1 header".into()));
    }
    let mut r = Reader { buf: bytes, pos: head };
    let n = r.u32()?;
    let mut houses = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let domain = Domain::from_tag(r.u8()?).ok_or_else(|| fmt_err(format!("house {i}: bad domain tag")))?;
        let seed = r.u64()?;
        let (w, h) = (r.u32()?, r.u32()?);
        if w == 0 || h == 0 || w > 4096 || h > 4096 {
            return Err(fmt_err(format!("house {i}: grid {w}x{h}")));
        }
        let grid = r.take(w * h)?.to_vec();
        let rooms = (0..r.u32()?)
            .map(|_| {
                let rect = Rect {
                    x: r.u32()?,
                    y: r.u32()?,
                    w: r.u32()?,
                    h: r.u32()?,
                };
                let room_type = RoomType::from_index(r.u8()? as usize)
                    .ok_or_else(|| fmt_err(format!("house {i}: bad room type")))?;
                Ok(Room { rect, room_type })
            })
            .collect::<Result<Vec<_>>>()?;
        let doors = (0..r.u32()?)
            .map(|_| {
                Ok(Door {
                    a: r.u32()?,
                    b: r.u32()?,
                    cell: (r.u32()?, r.u32()?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let house = HousePlan::from_layout(w, h, rooms, doors, domain, seed)?;
        let same = (0..h).all(|y| (0..w).all(|x| house.is_floor(x as i64, y as i64) == (grid[y * w + x] == 1)));
        if !same || grid.iter().any(|&b| b > 1) {
            return Err(fmt_err(format!("house {i}: grid disagrees with rooms and doors")));
        }
        houses.push(house);
    }
    if r.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(houses)
}

pub fn save_houses(houses: &[HousePlan], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, houses_to_bytes(houses))?;
    Ok(())
}

pub fn load_houses(path: impl AsRef<Path>) -> Result<Vec<HousePlan>> {
    houses_from_bytes(&fs::read(path)?)
}
