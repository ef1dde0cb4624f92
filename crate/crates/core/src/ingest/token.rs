//! Stateless session tokens: `hex(pseudonym || issued_at_be || hmac)`.

use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::study::Pseudonym;
use crate::TsMs;

type HmacSha256 = Hmac<Sha256>;

const BODY_LEN: usize = 16 + 8;
const TOKEN_LEN: usize = BODY_LEN + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionToken {
    pub pseudonym: Pseudonym,
    pub issued_at: TsMs,
}

#[derive(Clone)]
pub struct TokenSigner {
    key: [u8; 32],
}

impl std::fmt::Debug for TokenSigner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TokenSigner(..)")
    }
}

impl TokenSigner {
    pub fn new(key: [u8; 32]) -> Self {
        Self { key }
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.key).expect("any key length works for HMAC")
    }

    pub fn issue(&self, pseudonym: Pseudonym, issued_at: TsMs) -> String {
        let mut bytes = Vec::with_capacity(TOKEN_LEN);
        bytes.extend_from_slice(pseudonym.as_bytes());
        bytes.extend_from_slice(&issued_at.to_be_bytes());
        let mut mac = self.mac();
        mac.update(&bytes);
        bytes.extend_from_slice(&mac.finalize().into_bytes());
        hex::encode(bytes)
    }

    /// Checks the signature; no lookup is needed.
    pub fn verify(&self, token: &str) -> Option<SessionToken> {
        let bytes = hex::decode(token.trim()).ok()?;
        if bytes.len() != TOKEN_LEN {
            return None;
        }
        let mut mac = self.mac();
        mac.update(&bytes[..BODY_LEN]);
        mac.verify_slice(&bytes[BODY_LEN..]).ok()?;
        Some(SessionToken {
            pseudonym: Pseudonym(bytes[..16].try_into().unwrap()),
            issued_at: i64::from_be_bytes(bytes[16..24].try_into().unwrap()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper() {
        let signer = TokenSigner::new([7; 32]);
        let p = Pseudonym::random();
        let token = signer.issue(p, 1234);
        assert_eq!(
            signer.verify(&token),
            Some(SessionToken {
                pseudonym: p,
                issued_at: 1234
            })
        );
        let mut chars: Vec<char> = token.chars().collect();
        for i in [0, 33, 50, chars.len() - 1] {
            let orig = chars[i];
            chars[i] = if orig == '0' { '1' } else { '0' };
            assert_eq!(signer.verify(&chars.iter().collect::<String>()), None, "position {i}");
            chars[i] = orig;
        }
        assert_eq!(TokenSigner::new([8; 32]).verify(&token), None);
        assert_eq!(signer.verify("zz"), None);
    }
}
