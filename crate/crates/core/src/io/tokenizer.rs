use crate::model::TokenId;

/// Byte-level tokenizer: token id equals byte value, plus one BOS id.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: TokenId = 256;
    pub const VOCAB_SIZE: usize = 257;

    pub fn encode(&self, bytes: impl AsRef<[u8]>) -> Vec<TokenId> {
        bytes.as_ref().iter().map(|&b| b as TokenId).collect()
    }

    pub fn encode_with_bos(&self, bytes: impl AsRef<[u8]>) -> Vec<TokenId> {
        let mut out = vec![Self::BOS];
        out.extend(self.encode(bytes));
        out
    }

    /// Bytes for ids below 256; BOS and anything larger are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }
}
