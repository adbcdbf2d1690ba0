//! Embedded 8×12 digit bitmaps.

pub const GLYPH_W: usize = 8;
pub const GLYPH_H: usize = 12;

#[rustfmt::skip]
const DIGITS: [[&str; GLYPH_H]; 10] = [
    [
        "..####..",
        ".##..##.",
        "##....##",
        "##....##",
        "##...###",
        "##..####",
        "####..##",
        "###...##",
        "##....##",
        "##....##",
        ".##..##.",
        "..####..",
    ],
    [
        "...##...",
        "..###...",
        ".####...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        ".######.",
    ],
    [
        "..####..",
        ".##..##.",
        "##....##",
        "......##",
        ".....##.",
        "....##..",
        "...##...",
        "..##....",
        ".##.....",
        "##......",
        "##......",
        "########",
    ],
    [
        ".######.",
        "##....##",
        "......##",
        "......##",
        ".....##.",
        "..####..",
        ".....##.",
        "......##",
        "......##",
        "......##",
        "##....##",
        ".######.",
    ],
    [
        ".....##.",
        "....###.",
        "...####.",
        "..##.##.",
        ".##..##.",
        "##...##.",
        "##...##.",
        "########",
        ".....##.",
        ".....##.",
        ".....##.",
        ".....##.",
    ],
    [
        "########",
        "##......",
        "##......",
        "##......",
        "######..",
        ".....##.",
        "......##",
        "......##",
        "......##",
        "......##",
        "##...##.",
        ".#####..",
    ],
    [
        "..####..",
        ".##.....",
        "##......",
        "##......",
        "######..",
        "###..##.",
        "##....##",
        "##....##",
        "##....##",
        "##....##",
        ".##..##.",
        "..####..",
    ],
    [
        "########",
        "......##",
        "......##",
        ".....##.",
        ".....##.",
        "....##..",
        "....##..",
        "...##...",
        "...##...",
        "..##....",
        "..##....",
        "..##....",
    ],
    [
        "..####..",
        ".##..##.",
        "##....##",
        "##....##",
        ".##..##.",
        "..####..",
        ".##..##.",
        "##....##",
        "##....##",
        "##....##",
        ".##..##.",
        "..####..",
    ],
    [
        "..####..",
        ".##..##.",
        "##....##",
        "##....##",
        "##....##",
        ".##..###",
        "..######",
        "......##",
        "......##",
        ".....##.",
        "....##..",
        ".###....",
    ],
];

/// Binary bitmap of one digit at master resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph {
    rows: [u8; GLYPH_H],
}

impl Glyph {
    /// Digit `d` in `0..=9`.
    pub fn digit(d: u8) -> Glyph {
        let art = &DIGITS[d as usize];
        let mut rows = [0u8; GLYPH_H];
        for (row, line) in rows.iter_mut().zip(art) {
            for (c, ch) in line.bytes().enumerate() {
                if ch == b'#' {
                    *row |= 0x80 >> c;
                }
            }
        }
        Glyph { rows }
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.rows[row] & (0x80 >> col) != 0
    }

    pub fn popcount(&self) -> u32 {
        self.rows.iter().map(|r| r.count_ones()).sum()
    }
}
