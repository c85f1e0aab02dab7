//! Salted password hashes. The portal stores them as opaque credentials;
//! only this module knows how to make and check one.

use medirelay_core::workflow::Credential;
use medirelay_core::IdGen;
use sha2::Sha256;

use crate::error::ServiceError;

const SCHEME_PREFIX: &str = "pbkdf2-sha256:";
const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;
pub const MIN_PASSWORD_LEN: usize = 8;

/// Hashes `password` with a fresh salt. The iteration count is kept in the
/// scheme so it can be raised without invalidating stored credentials.
pub fn hash_password(password: &str, iterations: u32, ids: &mut IdGen) -> Result<Credential, ServiceError> {
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(ServiceError::BadRequest(format!(
            "password must have at least {MIN_PASSWORD_LEN} characters"
        )));
    }
    let mut salt = [0u8; SALT_LEN];
    ids.fill(&mut salt);
    Ok(Credential {
        scheme: format!("{SCHEME_PREFIX}{iterations}"),
        salt: hex::encode(salt),
        hash: hex::encode(derive(password, &salt, iterations)),
    })
}

/// Checks `password` against a stored credential in constant time.
pub fn verify_password(password: &str, credential: &Credential) -> bool {
    let Some(iterations) = credential
        .scheme
        .strip_prefix(SCHEME_PREFIX)
        .and_then(|n| n.parse::<u32>().ok())
        .filter(|n| *n > 0)
    else {
        return false;
    };
    let (Ok(salt), Ok(expected)) = (hex::decode(&credential.salt), hex::decode(&credential.hash)) else {
        return false;
    };
    let actual = derive(password, &salt, iterations);
    expected.len() == actual.len() && expected.iter().zip(actual).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> [u8; HASH_LEN] {
    let mut out = [0u8; HASH_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}
