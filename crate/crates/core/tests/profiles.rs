mod common;

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::net::TcpListener;
use std::time::Duration;

use cllmr_core::cemb::{self, Precision};
use cllmr_core::profiles::{
    build_item_prompt, build_user_prompt, embed_profiles, generate_profiles, read_profiles,
    write_profiles, Dataset, Embedder, HttpConfig, HttpProvider, InteractedItem, MockProvider,
    NodeKind, ProfileError, ProfileProvider, ProfileText,
};

fn meta(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn items(specs: &[(&str, &str, &str)]) -> Vec<InteractedItem> {
    specs
        .iter()
        .map(|(title, description, review)| InteractedItem {
            title: title.to_string(),
            description: description.to_string(),
            review: review.to_string(),
        })
        .collect()
}

#[test]
fn amazon_item_prompt_quotes_the_attribute_schema() {
    let prompt = build_item_prompt(
        &meta(&[("title", "Dune"), ("description", "Desert politics and prophecy.")]),
        &[],
        Dataset::Amazon,
    )
    .unwrap();
    assert!(prompt.body.contains("\"title\": \"the title of the book\""));
    assert!(prompt.body.contains("\"title\": \"Dune\""));
    assert!(prompt.body.contains("\"description\": \"Desert politics and prophecy.\""));
    assert_eq!(prompt.kind, NodeKind::Item);
    assert_eq!(prompt.dataset, Dataset::Amazon);
}

#[test]
fn steam_prompt_renders_absent_city_as_none() {
    let prompt = build_item_prompt(
        &meta(&[("name", "Blue Bottle"), ("categories", "coffee, cafe")]),
        &["great espresso".to_string()],
        Dataset::Steam,
    )
    .unwrap();
    assert!(prompt.body.contains("\"city\": \"None\""));
    assert!(prompt.body.contains("\"name\": \"Blue Bottle\""));
    assert!(prompt.body.contains("[\"great espresso\"]"));
}

#[test]
fn empty_feedback_renders_an_empty_list() {
    let prompt =
        build_item_prompt(&meta(&[("name", "Hollow Knight")]), &[], Dataset::Yelp).unwrap();
    assert!(prompt.body.ends_with("\n[]"));
    assert!(prompt.body.contains("\"publisher\": \"None\""));
}

#[test]
fn missing_required_keys_are_named() {
    let err = build_item_prompt(&meta(&[("title", "Dune")]), &[], Dataset::Amazon).unwrap_err();
    match err {
        ProfileError::MissingKey { dataset, key } => {
            assert_eq!(dataset, Dataset::Amazon);
            assert_eq!(key, "description");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

fn payload_of(body: &str) -> &str {
    body.split_once("\n\nThe information:\n").expect("payload marker present").1
}

#[test]
fn single_interacted_book_renders_one_block() {
    let prompt =
        build_user_prompt(&items(&[("Dune", "Epic scope.", "Loved it.")]), Dataset::Amazon)
            .unwrap();
    let payload = payload_of(&prompt.body);
    assert_eq!(payload.matches("\"title\":").count(), 1);
    assert_eq!(prompt.kind, NodeKind::User);
}

#[test]
fn interacted_games_render_in_input_order() {
    let prompt = build_user_prompt(
        &items(&[
            ("Portal", "Puzzles.", "Clever."),
            ("Hades", "Roguelike.", "Stylish."),
            ("Celeste", "Platformer.", "Tough."),
        ]),
        Dataset::Yelp,
    )
    .unwrap();
    let payload = payload_of(&prompt.body);
    assert_eq!(payload.matches("\"title\":").count(), 3);
    let positions: Vec<usize> =
        ["Portal", "Hades", "Celeste"].iter().map(|t| payload.find(t).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn user_prompt_matches_the_golden_file() {
    let prompt = build_user_prompt(
        &items(&[
            (
                "The Name of the Wind",
                "A lyrical fantasy about a gifted orphan chasing the truth behind a legend.",
                "Beautifully written, I could not put it down.",
            ),
            (
                "A Wizard of Earthsea",
                "A coming-of-age tale of a young mage learning the cost of pride.",
                "A quiet, wise book that rewards patience.",
            ),
        ]),
        Dataset::Amazon,
    )
    .unwrap();
    assert_eq!(prompt.body, include_str!("data/user_prompt_amazon.golden"));
}

#[test]
fn empty_interaction_lists_are_rejected() {
    assert!(matches!(
        build_user_prompt(&[], Dataset::Steam).unwrap_err(),
        ProfileError::EmptyItemList
    ));
}

#[test]
fn prompt_rendering_is_pure() {
    let m = meta(&[("name", "Factorio"), ("tags", "automation")]);
    let feedback = vec!["addictive".to_string()];
    let a = build_item_prompt(&m, &feedback, Dataset::Yelp).unwrap();
    let b = build_item_prompt(&m, &feedback, Dataset::Yelp).unwrap();
    assert_eq!(a.body, b.body);
}

#[test]
fn quotes_in_metadata_are_escaped() {
    let prompt = build_item_prompt(
        &meta(&[("title", "The \"Best\" Book"), ("description", "Line\nbreak")]),
        &[],
        Dataset::Amazon,
    )
    .unwrap();
    assert!(prompt.body.contains("\"The \\\"Best\\\" Book\""));
    assert!(prompt.body.contains("Line\\nbreak"));
}

#[test]
fn custom_dataset_renders_every_metadata_key() {
    let prompt = build_item_prompt(
        &meta(&[("title", "Widget"), ("colour", "red"), ("size", "large")]),
        &[],
        Dataset::Custom,
    )
    .unwrap();
    let payload = payload_of(&prompt.body);
    assert!(payload.starts_with("{\"title\": \"Widget\""));
    assert!(payload.contains("\"colour\": \"red\""));
    assert!(payload.contains("\"size\": \"large\""));
}

fn sample_prompt() -> cllmr_core::profiles::PromptText {
    build_item_prompt(
        &meta(&[("title", "Dune"), ("description", "Desert politics and prophecy.")]),
        &[],
        Dataset::Amazon,
    )
    .unwrap()
}

#[test]
fn mock_provider_is_deterministic() {
    let provider = MockProvider::new(1);
    let prompt = sample_prompt();
    assert_eq!(provider.generate(&prompt).unwrap(), provider.generate(&prompt).unwrap());
}

#[test]
fn mock_profiles_stay_under_the_word_budget() {
    let provider = MockProvider::new(7);
    for dataset in [Dataset::Amazon, Dataset::Yelp, Dataset::Steam, Dataset::Custom] {
        let prompt = build_user_prompt(
            &items(&[("Portal", "Puzzles and wit for patient players.", "Clever.")]),
            dataset,
        )
        .unwrap();
        let response = provider.generate(&prompt).unwrap();
        let words =
            response.summarisation.split_whitespace().count()
                + response.reasoning.split_whitespace().count();
        assert!(words <= 200, "{dataset}: {words} words");
        assert!(!response.summarisation.is_empty());
        assert!(!response.reasoning.is_empty());
    }
}

#[test]
fn mock_output_reflects_the_prompt_contents() {
    let provider = MockProvider::new(1);
    let a = provider.generate(&sample_prompt()).unwrap();
    let b = provider
        .generate(
            &build_item_prompt(
                &meta(&[("title", "Neuromancer"), ("description", "Console cowboys.")]),
                &[],
                Dataset::Amazon,
            )
            .unwrap(),
        )
        .unwrap();
    assert_ne!(a, b);
}

/// Counts connections to a throwaway local port while `work` runs.
fn with_connection_tripwire(work: impl FnOnce()) -> usize {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    work();
    let mut count = 0;
    while listener.accept().is_ok() {
        count += 1;
    }
    count
}

#[test]
fn offline_components_never_touch_the_network() {
    let connections = with_connection_tripwire(|| {
        let provider = MockProvider::new(3);
        let prompts: Vec<(u32, _)> = (0..20)
            .map(|i| {
                let title = format!("Book {i}");
                let prompt = build_item_prompt(
                    &meta(&[("title", title.as_str()), ("description", "test")]),
                    &[],
                    Dataset::Amazon,
                )
                .unwrap();
                (i, prompt)
            })
            .collect();
        let profiles = generate_profiles(&provider, &prompts).unwrap();
        embed_profiles(&profiles, &Embedder::hash_mock()).unwrap();
    });
    assert_eq!(connections, 0);
}

#[test]
fn generated_profiles_keep_input_order_and_ids() {
    let provider = MockProvider::new(2);
    let prompts: Vec<(u32, _)> = [(4u32, "Dune"), (1, "Hyperion"), (9, "Blindsight")]
        .iter()
        .map(|(id, title)| {
            let prompt = build_item_prompt(
                &meta(&[("title", title), ("description", "sf")]),
                &[],
                Dataset::Amazon,
            )
            .unwrap();
            (*id, prompt)
        })
        .collect();
    let profiles = generate_profiles(&provider, &prompts).unwrap();
    let ids: Vec<u32> = profiles.iter().map(|p| p.node_id).collect();
    assert_eq!(ids, vec![4, 1, 9]);
    assert!(profiles.iter().all(|p| p.kind == NodeKind::Item));
}

#[test]
fn duplicate_node_ids_are_rejected() {
    let provider = MockProvider::new(2);
    let prompt = sample_prompt();
    let prompts = vec![(3u32, prompt.clone()), (3u32, prompt)];
    assert!(matches!(
        generate_profiles(&provider, &prompts).unwrap_err(),
        ProfileError::DuplicateNode { id: 3 }
    ));
}

/// Serves `responses` in order on a fresh local port, one HTTP exchange
/// per connection, and records each request head + body.
fn stub_server(responses: Vec<String>) -> (String, std::sync::mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        for response in responses {
            let Ok((mut stream, _)) = listener.accept() else { return };
            stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
            let mut raw = Vec::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = stream.read(&mut buf).unwrap_or(0);
                if n == 0 {
                    break;
                }
                raw.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&raw);
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length: ").map(str::to_string))
                        .and_then(|v| v.trim().parse::<usize>().ok())
                        .unwrap_or(0);
                    if raw.len() >= head_end + 4 + content_length {
                        break;
                    }
                }
            }
            let _ = tx.send(String::from_utf8_lossy(&raw).into_owned());
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (url, rx)
}

fn http_response(status: &str, body: &str) -> String {
    format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
}

fn http_config(url: String) -> HttpConfig {
    HttpConfig {
        url,
        token: Some("sekrit".to_string()),
        timeout: Duration::from_secs(5),
        retries: 3,
    }
}

#[test]
fn http_provider_parses_the_two_part_response() {
    let body = r#"{"summarisation": "Fans of slow fantasy.", "reasoning": "The description stresses patience."}"#;
    let (url, requests) = stub_server(vec![http_response("200 OK", body)]);
    let provider = HttpProvider::new(http_config(url));

    let response = provider.generate(&sample_prompt()).unwrap();
    assert_eq!(response.summarisation, "Fans of slow fantasy.");
    assert_eq!(response.reasoning, "The description stresses patience.");

    let request = requests.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(request.contains("Authorization: Bearer sekrit"));
    assert!(request.contains("serve as an assistant"));
    assert!(request.contains("\"dataset\":\"amazon\""));
}

#[test]
fn http_provider_retries_and_reports_the_attempt_count() {
    let error_page = http_response("500 Internal Server Error", "{}");
    let (url, requests) = stub_server(vec![error_page.clone(), error_page.clone(), error_page]);
    let provider = HttpProvider::new(http_config(url));

    let err = provider.generate(&sample_prompt()).unwrap_err();
    match err {
        ProfileError::Provider { attempts, message } => {
            assert_eq!(attempts, 3);
            assert!(message.contains("500"), "message was '{message}'");
        }
        other => panic!("unexpected error {other:?}"),
    }
    for _ in 0..3 {
        requests.recv_timeout(Duration::from_secs(5)).unwrap();
    }
}

#[test]
fn unreachable_endpoints_error_after_the_retry_budget() {
    let url = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", listener.local_addr().unwrap())
    };
    let provider = HttpProvider::new(http_config(url));
    let err = provider.generate(&sample_prompt()).unwrap_err();
    assert!(matches!(err, ProfileError::Provider { attempts: 3, .. }));
}

#[test]
fn unparseable_success_bodies_are_format_errors_not_retried() {
    let (url, _requests) = stub_server(vec![http_response("200 OK", "not json at all")]);
    let provider = HttpProvider::new(http_config(url));
    assert!(matches!(
        provider.generate(&sample_prompt()).unwrap_err(),
        ProfileError::Format { .. }
    ));
}

#[test]
fn http_settings_come_from_the_environment() {
    std::env::set_var("CLLMR_LLM_URL", "http://localhost:9");
    std::env::set_var("CLLMR_LLM_TOKEN", "tok");
    std::env::set_var("CLLMR_LLM_TIMEOUT_S", "2.5");
    let config = HttpConfig::from_env().unwrap();
    assert_eq!(config.url, "http://localhost:9");
    assert_eq!(config.token.as_deref(), Some("tok"));
    assert_eq!(config.timeout, Duration::from_secs_f64(2.5));
    assert_eq!(config.retries, 3);

    std::env::set_var("CLLMR_LLM_TIMEOUT_S", "soon");
    assert!(matches!(
        HttpConfig::from_env().unwrap_err(),
        ProfileError::BadEnv { var: "CLLMR_LLM_TIMEOUT_S", .. }
    ));
    std::env::remove_var("CLLMR_LLM_TIMEOUT_S");

    std::env::remove_var("CLLMR_LLM_URL");
    assert!(matches!(
        HttpConfig::from_env().unwrap_err(),
        ProfileError::MissingEnv { var: "CLLMR_LLM_URL" }
    ));
    std::env::remove_var("CLLMR_LLM_TOKEN");
}

fn profile(node_id: u32, text: &str) -> ProfileText {
    ProfileText {
        node_id,
        kind: NodeKind::Item,
        summarisation: text.to_string(),
        reasoning: String::new(),
    }
}

#[test]
fn hash_mock_is_deterministic_and_bounded() {
    let table = embed_profiles(
        &[profile(0, "quiet wise book"), profile(1, "quiet wise book")],
        &Embedder::hash_mock(),
    )
    .unwrap();
    assert_eq!(table.dim, 64);
    assert_eq!(table.vectors[&0], table.vectors[&1]);
    for x in &table.vectors[&0] {
        assert!((-1.0..=1.0).contains(x));
    }
}

#[test]
fn changing_one_word_changes_the_vector() {
    let mut rng = cllmr_core::seeds::rng(11, "word-pairs");
    use rand::Rng;
    let vocab: Vec<String> = (0..50).map(|i| format!("word{i}")).collect();
    for _ in 0..100 {
        let len = rng.gen_range(3..12);
        let mut words: Vec<&str> =
            (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
        let original = words.join(" ");
        let position = rng.gen_range(0..len);
        let replacement = loop {
            let candidate = vocab[rng.gen_range(0..vocab.len())].as_str();
            if candidate != words[position] {
                break candidate;
            }
        };
        words[position] = replacement;
        let edited = words.join(" ");

        let table = embed_profiles(
            &[profile(0, &original), profile(1, &edited)],
            &Embedder::hash_mock(),
        )
        .unwrap();
        assert_ne!(
            table.vectors[&0], table.vectors[&1],
            "'{original}' vs '{edited}' collided"
        );
    }
}

#[test]
fn file_import_covers_a_full_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.cemb");
    let records: Vec<(u32, Vec<f64>)> =
        (0..20).map(|id| (id, vec![id as f64, -(id as f64), 0.5])).collect();
    cemb::write_vectors(&path, 3, &records, Precision::F32).unwrap();

    let profiles: Vec<ProfileText> = (0..20).map(|id| profile(id, "ignored")).collect();
    let table = embed_profiles(&profiles, &Embedder::FileImport { path }).unwrap();
    assert_eq!(table.vectors.len(), 20);
    assert_eq!(table.dim, 3);
    assert_eq!(table.vectors[&4], vec![4.0, -4.0, 0.5]);
}

#[test]
fn file_import_names_every_missing_node() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.cemb");
    let records: Vec<(u32, Vec<f64>)> =
        [0u32, 1, 2, 4, 6].iter().map(|&id| (id, vec![1.0, 2.0])).collect();
    cemb::write_vectors(&path, 2, &records, Precision::F32).unwrap();

    let profiles: Vec<ProfileText> = (0..7).map(|id| profile(id, "x")).collect();
    let err = embed_profiles(&profiles, &Embedder::FileImport { path }).unwrap_err();
    match err {
        ProfileError::Coverage { found, wanted, missing } => {
            assert_eq!(found, 5);
            assert_eq!(wanted, 7);
            assert_eq!(missing, vec![3, 5]);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn tables_are_total_over_the_node_space() {
    let table = embed_profiles(
        &[profile(0, "aa"), profile(1, "bb"), profile(2, "cc")],
        &Embedder::hash_mock(),
    )
    .unwrap();
    let mat = table.to_matrix(3).unwrap();
    assert_eq!(mat.nrows(), 3);
    assert_eq!(mat.ncols(), 64);
    for (id, vector) in &table.vectors {
        assert_eq!(mat.row(*id as usize).to_vec(), *vector);
    }

    assert!(matches!(table.to_matrix(4).unwrap_err(), ProfileError::Coverage { .. }));
    assert!(matches!(table.to_matrix(2).unwrap_err(), ProfileError::StrayNode { id: 2, .. }));
}

#[test]
fn mixed_profile_kinds_are_rejected() {
    let mut second = profile(1, "bb");
    second.kind = NodeKind::User;
    assert!(matches!(
        embed_profiles(&[profile(0, "aa"), second], &Embedder::hash_mock()).unwrap_err(),
        ProfileError::MixedKinds
    ));
    assert!(matches!(
        embed_profiles(&[], &Embedder::hash_mock()).unwrap_err(),
        ProfileError::EmptyProfiles
    ));
}

#[test]
fn profile_store_lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profiles.jsonl");
    let profiles = vec![
        ProfileText {
            node_id: 0,
            kind: NodeKind::User,
            summarisation: "Enjoys slow fantasy.".to_string(),
            reasoning: "Reviews praise patience.".to_string(),
        },
        ProfileText {
            node_id: 1,
            kind: NodeKind::Item,
            summarisation: "A quiet book.".to_string(),
            reasoning: "Readers mention calm.".to_string(),
        },
    ];
    write_profiles(&path, &profiles).unwrap();

    let raw = std::fs::read_to_string(&path).unwrap();
    let first_line = raw.lines().next().unwrap();
    assert_eq!(
        first_line,
        r#"{"id":0,"kind":"user","summarisation":"Enjoys slow fantasy.","reasoning":"Reviews praise patience."}"#
    );

    assert_eq!(read_profiles(&path).unwrap(), profiles);
}

#[test]
fn malformed_store_lines_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profiles.jsonl");
    std::fs::write(&path, "{\"id\":0,\"kind\":\"user\",\"summarisation\":\"a\",\"reasoning\":\"b\"}\nnot json\n").unwrap();
    match read_profiles(&path).unwrap_err() {
        ProfileError::Json { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected error {other:?}"),
    }
}
