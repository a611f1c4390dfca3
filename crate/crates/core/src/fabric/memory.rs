//! MN memory: a flat, lazily materialized byte address space.
//!
//! Regions come from a bump allocator and carry a repeating fill pattern, so
//! large lock tables cost nothing until a page is first touched. Words are
//! little-endian.

use std::collections::{BTreeMap, HashMap};

use super::FabricError;

const PAGE_SHIFT: u32 = 12;
const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;

#[derive(Debug, Clone)]
struct Region {
    len: u64,
    /// Byte `i` of the region initially holds `pattern[i % pattern.len()]`.
    pattern: Vec<u8>,
}

#[derive(Debug)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
    regions: BTreeMap<u64, Region>,
    next: u64,
    limit: u64,
}

impl Memory {
    pub fn new(limit: u64) -> Self {
        Self {
            pages: HashMap::new(),
            regions: BTreeMap::new(),
            next: 0,
            limit,
        }
    }

    /// Allocates `len` bytes, 64-byte aligned, initialized by repeating
    /// `pattern` (all zeros when empty).
    pub fn alloc(&mut self, len: u64, pattern: Vec<u8>) -> Result<u64, FabricError> {
        let base = self.next.next_multiple_of(64);
        let end = base.checked_add(len).ok_or(FabricError::OutOfMemory)?;
        if end > self.limit {
            return Err(FabricError::OutOfMemory);
        }
        self.regions.insert(base, Region { len, pattern });
        self.next = end;
        Ok(base)
    }

    pub fn allocated(&self) -> u64 {
        self.next
    }

    /// Restores every byte of `[addr, addr+len)` to its region fill pattern.
    pub fn reinitialize(&mut self, addr: u64, len: u64) -> Result<(), FabricError> {
        self.check(addr, len)?;
        let bytes: Vec<u8> = (addr..addr + len).map(|a| self.initial_byte(a)).collect();
        self.write(addr, &bytes)
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), FabricError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.next => Ok(()),
            _ => Err(FabricError::InvalidAddr { addr, len }),
        }
    }

    fn initial_byte(&self, addr: u64) -> u8 {
        match self.regions.range(..=addr).next_back() {
            Some((&base, r)) if addr < base + r.len && !r.pattern.is_empty() => {
                r.pattern[((addr - base) % r.pattern.len() as u64) as usize]
            }
            _ => 0,
        }
    }

    fn page_mut(&mut self, page: u64) -> &mut [u8; PAGE_SIZE as usize] {
        if !self.pages.contains_key(&page) {
            let mut buf = Box::new([0u8; PAGE_SIZE as usize]);
            let start = page << PAGE_SHIFT;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = self.initial_byte(start + i as u64);
            }
            self.pages.insert(page, buf);
        }
        self.pages.get_mut(&page).expect("page materialized above")
    }

    pub fn read(&mut self, addr: u64, len: u64) -> Result<Vec<u8>, FabricError> {
        self.check(addr, len)?;
        let mut out = Vec::with_capacity(len as usize);
        let mut a = addr;
        let end = addr + len;
        while a < end {
            let page = a >> PAGE_SHIFT;
            let off = (a & (PAGE_SIZE - 1)) as usize;
            let n = ((PAGE_SIZE - off as u64).min(end - a)) as usize;
            match self.pages.get(&page) {
                Some(p) => out.extend_from_slice(&p[off..off + n]),
                None => out.extend((a..a + n as u64).map(|x| self.initial_byte(x))),
            }
            a += n as u64;
        }
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), FabricError> {
        self.check(addr, data.len() as u64)?;
        let mut a = addr;
        let mut rest = data;
        while !rest.is_empty() {
            let off = (a & (PAGE_SIZE - 1)) as usize;
            let n = (PAGE_SIZE as usize - off).min(rest.len());
            self.page_mut(a >> PAGE_SHIFT)[off..off + n].copy_from_slice(&rest[..n]);
            a += n as u64;
            rest = &rest[n..];
        }
        Ok(())
    }

    pub fn read_u64(&mut self, addr: u64) -> Result<u64, FabricError> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<(), FabricError> {
        self.write(addr, &v.to_le_bytes())
    }

    /// Returns the previous value; the word is replaced only if it equalled `expected`.
    pub fn cas(&mut self, addr: u64, expected: u64, swap: u64) -> Result<u64, FabricError> {
        let old = self.read_u64(addr)?;
        if old == expected {
            self.write_u64(addr, swap)?;
        }
        Ok(old)
    }

    /// Wrapping 64-bit fetch-and-add; returns the previous value.
    pub fn faa(&mut self, addr: u64, add: u64) -> Result<u64, FabricError> {
        let old = self.read_u64(addr)?;
        self.write_u64(addr, old.wrapping_add(add))?;
        Ok(old)
    }
}
