//! Record layout model for simulated programs: declared field order, natural
//! alignment, total size rounded up to the largest member alignment.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scalar {
    U8,
    I32,
    U32,
    F32,
    I64,
    U64,
    F64,
}

impl Scalar {
    pub fn size(self) -> u64 {
        match self {
            Scalar::U8 => 1,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::I64 | Scalar::U64 | Scalar::F64 => 8,
        }
    }

    pub fn align(self) -> u64 {
        self.size()
    }
}

/// Field offsets and the padded size of a record with the given fields.
pub fn record_layout(fields: &[Scalar]) -> (Vec<u64>, u64) {
    let mut offsets = Vec::with_capacity(fields.len());
    let mut cursor = 0u64;
    let mut max_align = 1u64;
    for f in fields {
        cursor = cursor.next_multiple_of(f.align());
        offsets.push(cursor);
        cursor += f.size();
        max_align = max_align.max(f.align());
    }
    (offsets, cursor.next_multiple_of(max_align))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_ints_and_a_float() {
        // struct { int a, b; float f; }: f sits at offset 8, size 12.
        let (offsets, size) = record_layout(&[Scalar::I32, Scalar::I32, Scalar::F32]);
        assert_eq!(offsets, vec![0, 4, 8]);
        assert_eq!(size, 12);
    }

    #[test]
    fn mixed_alignment_padding() {
        let (offsets, size) = record_layout(&[Scalar::U8, Scalar::I64, Scalar::I32]);
        assert_eq!(offsets, vec![0, 8, 16]);
        assert_eq!(size, 24);
    }
}
