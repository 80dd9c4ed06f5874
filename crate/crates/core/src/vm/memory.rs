use std::collections::BTreeMap;

use crate::mir::{Kind, ELEM_SIZE};

/// Base address of the first global array.
pub const GLOBAL_BASE: u64 = 1 << 36;
/// Distance between consecutive global arrays.
pub const GLOBAL_STRIDE: u64 = 1 << 24;
/// Base address of the first stack slot.
pub const STACK_BASE: u64 = 0x7ff0_0000_0000;
/// Distance between consecutive stack slots.
pub const STACK_STRIDE: u64 = 1 << 20;

pub fn global_address(index: usize) -> u64 {
    GLOBAL_BASE + index as u64 * GLOBAL_STRIDE
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub kind: Kind,
    pub cells: Vec<u64>,
}

/// Outcome of resolving an address against the mapped regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Ok { base: u64, cell: usize },
    Unmapped,
    Misaligned,
}

/// Sparse address space made of disjoint 8-byte-cell regions separated by
/// large unmapped gaps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Memory {
    regions: BTreeMap<u64, Region>,
}

impl Memory {
    pub fn map(&mut self, base: u64, kind: Kind, cells: Vec<u64>) {
        debug_assert_eq!(base % ELEM_SIZE, 0);
        self.regions.insert(base, Region { kind, cells });
    }

    pub fn unmap(&mut self, base: u64) {
        self.regions.remove(&base);
    }

    pub fn region(&self, base: u64) -> Option<&Region> {
        self.regions.get(&base)
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, &Region)> {
        self.regions.iter().map(|(b, r)| (*b, r))
    }

    pub fn resolve(&self, addr: u64) -> Access {
        let Some((&base, region)) = self.regions.range(..=addr).next_back() else {
            return Access::Unmapped;
        };
        let off = addr - base;
        if off >= region.cells.len() as u64 * ELEM_SIZE {
            return Access::Unmapped;
        }
        if !off.is_multiple_of(ELEM_SIZE) {
            return Access::Misaligned;
        }
        Access::Ok {
            base,
            cell: (off / ELEM_SIZE) as usize,
        }
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        !matches!(self.resolve(addr), Access::Unmapped)
    }

    pub fn read(&self, addr: u64) -> Result<u64, Access> {
        match self.resolve(addr) {
            Access::Ok { base, cell } => Ok(self.regions[&base].cells[cell]),
            other => Err(other),
        }
    }

    pub fn write(&mut self, addr: u64, v: u64) -> Result<(), Access> {
        match self.resolve(addr) {
            Access::Ok { base, cell } => {
                self.regions.get_mut(&base).unwrap().cells[cell] = v;
                Ok(())
            }
            other => Err(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_classes() {
        let mut m = Memory::default();
        m.map(GLOBAL_BASE, Kind::I64, vec![0; 4]);
        assert_eq!(m.resolve(GLOBAL_BASE + 8), Access::Ok { base: GLOBAL_BASE, cell: 1 });
        assert_eq!(m.resolve(GLOBAL_BASE + 9), Access::Misaligned);
        assert_eq!(m.resolve(GLOBAL_BASE + 32), Access::Unmapped);
        assert_eq!(m.resolve(GLOBAL_BASE - 8), Access::Unmapped);
        m.write(GLOBAL_BASE + 24, 7).unwrap();
        assert_eq!(m.read(GLOBAL_BASE + 24), Ok(7));
    }
}
