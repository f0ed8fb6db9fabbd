//! Minimal `multipart/form-data` parser (RFC 7578) for buffered bodies.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub name: String,
    pub filename: Option<String>,
    pub content_type: Option<String>,
    pub data: Vec<u8>,
}

/// Extracts the boundary parameter from a `Content-Type` header value.
pub fn boundary(content_type: &str) -> Result<String, String> {
    let mut params = content_type.split(';');
    let mime = params.next().unwrap_or_default().trim();
    if !mime.eq_ignore_ascii_case("multipart/form-data") {
        return Err(format!("expected multipart/form-data, got {mime:?}"));
    }
    for p in params {
        if let Some((k, v)) = p.split_once('=') {
            if k.trim().eq_ignore_ascii_case("boundary") {
                let b = v.trim().trim_matches('"');
                if b.is_empty() || b.len() > 70 {
                    return Err("invalid multipart boundary".into());
                }
                return Ok(b.to_string());
            }
        }
    }
    Err("multipart boundary missing".into())
}

fn find(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    let first = needle[0];
    let last_start = haystack.len() - needle.len();
    let mut i = from;
    while i <= last_start {
        let at = i + haystack[i..=last_start].iter().position(|&b| b == first)?;
        if &haystack[at..at + needle.len()] == needle {
            return Some(at);
        }
        i = at + 1;
    }
    None
}

/// Value of `key` in a header parameter list such as
/// `form-data; name="file"; filename="a.avi"`.
fn param(header: &str, key: &str) -> Option<String> {
    header.split(';').skip(1).find_map(|p| {
        let (k, v) = p.split_once('=')?;
        k.trim().eq_ignore_ascii_case(key).then(|| v.trim().trim_matches('"').to_string())
    })
}

pub fn parse(content_type: &str, body: &[u8]) -> Result<Vec<Part>, String> {
    let boundary = boundary(content_type)?;
    let delim = format!("--{boundary}").into_bytes();
    let mut pos = find(body, &delim, 0).ok_or("multipart body has no boundary")? + delim.len();
    let mut parts = Vec::new();
    let sep = [b"\r\n".as_slice(), &delim].concat();
    loop {
        if body[pos..].starts_with(b"--") {
            return Ok(parts);
        }
        if !body[pos..].starts_with(b"\r\n") {
            return Err("malformed boundary line".into());
        }
        pos += 2;
        let head_end = find(body, b"\r\n\r\n", pos).ok_or("unterminated part headers")?;
        let headers = std::str::from_utf8(&body[pos..head_end]).map_err(|_| "part headers are not UTF-8")?;
        let (mut name, mut filename, mut ctype) = (None, None, None);
        for line in headers.split("\r\n") {
            let Some((k, v)) = line.split_once(':') else {
                return Err(format!("malformed part header {line:?}"));
            };
            let v = v.trim();
            if k.trim().eq_ignore_ascii_case("content-disposition") {
                name = param(v, "name");
                filename = param(v, "filename");
            } else if k.trim().eq_ignore_ascii_case("content-type") {
                ctype = Some(v.to_string());
            }
        }
        let data_start = head_end + 4;
        let data_end = find(body, &sep, data_start).ok_or("unterminated part body")?;
        parts.push(Part {
            name: name.ok_or("part without a name")?,
            filename,
            content_type: ctype,
            data: body[data_start..data_end].to_vec(),
        });
        pos = data_end + sep.len();
    }
}

/// Encodes parts as a multipart body; returns `(content_type, body)`.
pub fn encode(parts: &[Part], boundary: &str) -> (String, Vec<u8>) {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        let mut disp = format!("Content-Disposition: form-data; name=\"{}\"", p.name);
        if let Some(f) = &p.filename {
            disp.push_str(&format!("; filename=\"{f}\""));
        }
        body.extend_from_slice(disp.as_bytes());
        body.extend_from_slice(b"\r\n");
        if let Some(ct) = &p.content_type {
            body.extend_from_slice(format!("Content-Type: {ct}\r\n").as_bytes());
        }
        body.extend_from_slice(b"\r\n");
        body.extend_from_slice(&p.data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_browser_style_body() {
        let body = b"--XyZ\r\nContent-Disposition: form-data; name=\"options\"\r\n\r\n{\"allow_long\":true}\r\n\
--XyZ\r\nContent-Disposition: form-data; name=\"file\"; filename=\"clip.avi\"\r\nContent-Type: video/x-msvideo\r\n\r\n\
RIFF\r\n--not-a-boundary\r\n--XyZ--\r\n";
        let parts = parse("multipart/form-data; boundary=XyZ", body).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].name, "options");
        assert_eq!(parts[0].data, b"{\"allow_long\":true}");
        assert_eq!(parts[1].filename.as_deref(), Some("clip.avi"));
        assert_eq!(parts[1].content_type.as_deref(), Some("video/x-msvideo"));
        assert_eq!(parts[1].data, b"RIFF\r\n--not-a-boundary");
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(boundary("application/json").is_err());
        assert!(boundary("multipart/form-data").is_err());
        assert_eq!(boundary("multipart/form-data; boundary=\"a b\"").unwrap(), "a b");
        assert!(parse("multipart/form-data; boundary=q", b"--q\r\nno-colon\r\n\r\nx\r\n--q--").is_err());
        assert!(parse("multipart/form-data; boundary=q", b"--q\r\nContent-Disposition: form-data; name=\"a\"\r\n\r\nx").is_err());
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..200), 1..4)
        ) {
            let parts: Vec<Part> = payloads
                .into_iter()
                .enumerate()
                .map(|(i, data)| Part {
                    name: format!("f{i}"),
                    filename: (i % 2 == 0).then(|| format!("x{i}.bin")),
                    content_type: None,
                    data,
                })
                .collect();
            let (ct, body) = encode(&parts, "----mseva7f3a9c");
            prop_assert_eq!(parse(&ct, &body).unwrap(), parts);
        }
    }
}
