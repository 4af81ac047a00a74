use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use routelens::rater::HttpRater;
use routelens_core::paths::{GroupRater, GroupSample};

/// Minimal HTTP/1.1 server: passes even group indices, records bodies.
fn serve(requests: usize) -> (String, Arc<Mutex<Vec<serde_json::Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/rate", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let pass = req["group_index"].as_u64().unwrap() % 2 == 0;
            log.lock().unwrap().push(req);
            let reply = format!("{{\"pass\": {pass}}}");
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn sample(group_index: usize) -> GroupSample {
    GroupSample {
        group_index,
        members: vec![0, 2],
        token_ids: vec![5, 9],
    }
}

#[test]
fn verdicts_come_from_the_endpoint() {
    let (url, seen) = serve(2);
    let rater = HttpRater::new(url, vec![Some("a : b".into()), None, Some("x".into())]);
    assert!(rater.rate(&sample(4)));
    assert!(!rater.rate(&sample(3)));
    assert_eq!(rater.failures(), 0);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0]["tokens"][0]["token_id"], 5);
    assert_eq!(seen[0]["tokens"][0]["context"], "a : b");
    assert_eq!(seen[0]["tokens"][1]["context"], "x");
}

#[test]
fn unreachable_endpoint_rejects_and_counts() {
    // Bind then drop to get a port with nothing listening.
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let rater = HttpRater::new(format!("http://127.0.0.1:{port}/rate"), Vec::new());
    assert!(!rater.rate(&sample(0)));
    assert!(!rater.rate(&sample(2)));
    assert_eq!(rater.failures(), 2);
}
