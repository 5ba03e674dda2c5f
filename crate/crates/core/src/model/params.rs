//! Named views into one flat parameter buffer.

use std::ops::Range;

/// Location and shape of one parameter tensor inside a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    pub fn of<'a, T>(&self, buf: &'a [T]) -> &'a [T] {
        &buf[self.range()]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, buf: &'a mut [T]) -> &'a mut [T] {
        &mut buf[self.range()]
    }
}

/// Ordered list of named slots; the order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<(String, Slot)>,
    total: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += slot.len();
        self.entries.push((name.into(), slot));
        slot
    }

    pub fn entries(&self) -> &[(String, Slot)] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Name of the tensor that owns flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, s)| s.range().contains(&i))
            .map(|(n, _)| n.as_str())
    }
}
