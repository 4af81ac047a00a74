/// Per-token metadata carried alongside hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenMeta {
    pub token_id: u32,
    pub seq_id: u32,
    /// Position within the sequence.
    pub pos: u32,
    /// Index into the capture's language list.
    pub lang: u8,
}
