//! The `/api/v1` routes over real HTTP: status codes, error bodies,
//! optimistic concurrency, paging and downloads.

use std::path::Path;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::{json, Value};

use nluforge::gateway::{Gateway, Platform, PlatformConfig, SubmitJobRequest};
use nluforge::models::Hyperparams;
use nluforge::store::{ObjectKey, ObjectStore};
use nluforge::worker::JobSpec;

struct Api {
    gateway: Gateway,
    http: Client,
    _dir: tempfile::TempDir,
}

fn serve() -> Api {
    let dir = tempfile::tempdir().unwrap();
    let config = PlatformConfig {
        store_root: dir.path().join("store"),
        tick_period_s: 0.02,
        ..PlatformConfig::default()
    };
    let gateway = Gateway::start(Platform::open(config).unwrap(), "127.0.0.1:0").unwrap();
    Api {
        gateway,
        http: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
        _dir: dir,
    }
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

impl Api {
    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.gateway.url())
    }

    fn get(&self, path: &str) -> RequestBuilder {
        self.http.get(self.url(path))
    }

    fn post(&self, path: &str) -> RequestBuilder {
        self.http.post(self.url(path))
    }

    fn import(&self, id: &str, fixture_name: &str) -> Value {
        let resp = self
            .post("/datasets")
            .json(&json!({"format": "conll", "name": id, "id": id, "payload": fixture(fixture_name)}))
            .send()
            .unwrap();
        expect(resp, 201)
    }

    fn submit(&self, spec: JobSpec) -> Value {
        let req = SubmitJobRequest {
            spec,
            target_instance: None,
            idempotency_key: None,
        };
        expect(self.post("/jobs").json(&req).send().unwrap(), 201)
    }

    fn wait(&self, job_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let job = expect(self.get(&format!("/jobs/{job_id}")).send().unwrap(), 200);
            if ["succeeded", "failed", "cancelled"].contains(&job["state"].as_str().unwrap()) {
                return job;
            }
            assert!(Instant::now() < deadline, "job {job_id} did not finish");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Imports the confusable corpus, trains on it and tests on its test
    /// split. Returns the test job id.
    fn trained(&self) -> &'static str {
        self.import("ed", "confusable.conll");
        self.submit(JobSpec::train("t1", "ed", Hyperparams::default()));
        assert_eq!(self.wait("t1")["state"], "succeeded");
        let mut test = JobSpec::test("e1", "ed", "ed", "unused".into());
        test.model.as_mut().unwrap().version = None;
        self.submit(test);
        assert_eq!(self.wait("e1")["state"], "succeeded");
        "e1"
    }
}

fn expect(resp: Response, status: u16) -> Value {
    let got = resp.status().as_u16();
    let text = resp.text().unwrap();
    assert_eq!(got, status, "body: {text}");
    serde_json::from_str(&text).unwrap_or(Value::Null)
}

/// Asserts the error body shape and returns it.
fn expect_error(resp: Response, status: u16, code: &str) -> Value {
    let body = expect(resp, status);
    assert_eq!(body["code"], code, "{body}");
    assert_eq!(body["http_status"], status);
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
    body
}

#[test]
fn health_and_unknown_routes() {
    let api = serve();
    let health = expect(api.get("/healthz").send().unwrap(), 200);
    assert_eq!(health["status"], "ok");
    expect_error(api.get("/nothing/here").send().unwrap(), 404, "not_found");
    expect_error(api.http.get(format!("{}/elsewhere", api.gateway.url())).send().unwrap(), 404, "not_found");
}

#[test]
fn dataset_lifecycle_and_version_conflicts() {
    let api = serve();
    let imported = api.import("ed", "confusable.conll");
    assert_eq!(imported["dataset"]["id"], "ed");
    assert_eq!(imported["dataset"]["n_utterances"], 53);
    let v0 = imported["dataset"]["version"].as_u64().unwrap();

    let list = expect(api.get("/datasets").send().unwrap(), 200);
    assert_eq!(list.as_array().unwrap().len(), 1);
    let view = expect(api.get("/datasets/ed").send().unwrap(), 200);
    assert_eq!(view["utterances"][0]["id"], "ed000");

    let exported = api.get("/datasets/ed/export?format=conll").send().unwrap();
    assert_eq!(exported.status().as_u16(), 200);
    let text = exported.text().unwrap();
    assert!(text.contains("# id = ed037"));
    let again = api.import("ed-copy", "confusable.conll");
    let copy = expect(api.get("/datasets/ed-copy").send().unwrap(), 200);
    assert_eq!(copy["utterances"], view["utterances"]);
    assert_eq!(again["dataset"]["n_utterances"], 53);

    let valid = expect(api.post("/datasets/ed/validate").send().unwrap(), 200);
    assert_eq!(valid["valid"], true);

    let added = api
        .post("/datasets/ed/utterances")
        .json(&json!({"expected_version": v0, "id": "new1", "text": "lighten the sky", "intent": "adjust_brightness"}))
        .send()
        .unwrap();
    let v1 = expect(added, 201)["version"].as_u64().unwrap();
    assert!(v1 > v0);

    // The stale version is rejected with both versions in the details.
    let stale = api
        .http
        .patch(api.url("/datasets/ed/utterances/new1"))
        .json(&json!({"expected_version": v0, "patch": {"split": "dev"}}))
        .send()
        .unwrap();
    let err = expect_error(stale, 409, "version_conflict");
    assert_eq!(err["details"]["expected"], v0);
    assert_eq!(err["details"]["actual"], v1);

    let fresh = api
        .http
        .patch(api.url("/datasets/ed/utterances/new1"))
        .json(&json!({"expected_version": v1, "patch": {"split": "dev", "slots": [{"start": 0, "end": 1, "label": "adjust_brightness"}]}}))
        .send()
        .unwrap();
    assert!(expect(fresh, 200)["version"].as_u64().unwrap() > v1);
    let missing = api
        .http
        .patch(api.url("/datasets/ed/utterances/nope"))
        .json(&json!({"expected_version": v1 + 1, "patch": {}}))
        .send()
        .unwrap();
    expect_error(missing, 404, "not_found");

    let old = expect(api.get(&format!("/datasets/ed?version={v0}")).send().unwrap(), 200);
    assert_eq!(old["utterances"].as_array().unwrap().len(), 53);
}

#[test]
fn malformed_requests() {
    let api = serve();
    expect_error(api.post("/datasets").body("{not json").send().unwrap(), 400, "invalid_request");
    expect_error(
        api.post("/datasets").json(&json!({"format": "conll", "name": "x"})).send().unwrap(),
        400,
        "invalid_request",
    );
    expect_error(
        api.post("/datasets")
            .json(&json!({"format": "conll", "name": "x", "payload": "a\tO\n", "payload_path": "/tmp/x"}))
            .send()
            .unwrap(),
        400,
        "invalid_request",
    );
    expect_error(
        api.post("/datasets").json(&json!({"format": "yaml", "name": "x", "payload": ""})).send().unwrap(),
        400,
        "invalid_request",
    );
    // Two utterances with one id fail validation.
    let dup = "# id = a\nx\tO\n\n# id = a\ny\tO\n";
    let err = expect_error(
        api.post("/datasets").json(&json!({"format": "conll", "name": "dup", "payload": dup})).send().unwrap(),
        422,
        "validation_failed",
    );
    assert!(err["details"]["issues"].as_array().is_some_and(|i| !i.is_empty()));

    expect_error(api.get("/datasets/absent").send().unwrap(), 404, "not_found");
    expect_error(api.get("/datasets/absent/export?format=conll").send().unwrap(), 404, "not_found");
    api.import("ed", "confusable.conll");
    expect_error(api.get("/datasets/ed/export").send().unwrap(), 400, "invalid_request");
    expect_error(api.get("/datasets/ed?version=abc").send().unwrap(), 400, "invalid_request");
    expect_error(api.post("/jobs").json(&json!({"spec": {}, "surprise": 1})).send().unwrap(), 400, "invalid_request");
    expect_error(api.get("/jobs/absent").send().unwrap(), 404, "not_found");
    expect_error(api.get("/reports/absent").send().unwrap(), 404, "not_found");
    expect_error(api.http.delete(api.url("/instances/i-9999")).send().unwrap(), 404, "not_found");
}

#[test]
fn jobs_reports_and_drill_down_paging() {
    let api = serve();
    let key = api.trained();

    let jobs = expect(api.get("/jobs").send().unwrap(), 200);
    assert_eq!(jobs.as_array().unwrap().len(), 2);
    expect_error(api.post(&format!("/jobs/{key}/cancel")).send().unwrap(), 409, "illegal_state");

    let report = expect(api.get(&format!("/reports/{key}")).send().unwrap(), 200);
    assert_eq!(report["key"], key);
    assert!(report["report"]["slot_f1"].as_f64().is_some());

    expect_error(api.get(&format!("/reports/{key}/confusion")).send().unwrap(), 400, "invalid_request");
    expect_error(api.get(&format!("/reports/{key}/confusion?level=word")).send().unwrap(), 400, "invalid_request");
    let matrix = expect(api.get(&format!("/reports/{key}/confusion?level=token_label")).send().unwrap(), 200);
    let cell = matrix["cells"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["gold"] == "B-adjust_brightness" && c["pred"] == "B-adjust_color")
        .expect("confusable cell present")
        .clone();
    let count = cell["count"].as_u64().unwrap() as usize;
    assert!(count >= 2);

    let cell_path = |cursor: Option<&str>| {
        let mut p = format!("/reports/{key}/confusion/cell?level=token_label&gold=B-adjust_brightness&pred=B-adjust_color&limit=1");
        if let Some(c) = cursor {
            p.push_str(&format!("&cursor={c}"));
        }
        p
    };
    let mut items = Vec::new();
    let mut cursor: Option<String> = None;
    loop {
        let page = expect(api.get(&cell_path(cursor.as_deref())).send().unwrap(), 200);
        assert_eq!(page["count"].as_u64().unwrap() as usize, count);
        assert_eq!(page["items"].as_array().unwrap().len(), 1);
        items.extend(page["items"].as_array().unwrap().clone());
        match page["next_cursor"].as_str() {
            Some(c) => cursor = Some(c.to_string()),
            None => break,
        }
    }
    assert_eq!(items.len(), count);
    let ids: Vec<&str> = items.iter().map(|i| i["utterance_id"].as_str().unwrap()).collect();
    assert!(ids.contains(&"ed037") && ids.contains(&"ed038"), "{ids:?}");
    expect_error(api.get(&cell_path(Some("zz"))).send().unwrap(), 400, "invalid_request");
    expect_error(
        api.get(&format!("/reports/{key}/confusion/cell?level=intent&gold=nope&pred=nope")).send().unwrap(),
        404,
        "not_found",
    );
}

#[test]
fn idempotent_submission() {
    let api = serve();
    api.import("ed", "confusable.conll");
    let req = SubmitJobRequest {
        spec: JobSpec::train("", "ed", Hyperparams::default()),
        target_instance: None,
        idempotency_key: Some("once".into()),
    };
    let first = expect(api.post("/jobs").json(&req).send().unwrap(), 201);
    let second = expect(api.post("/jobs").json(&req).send().unwrap(), 201);
    assert_eq!(first["spec"]["job_id"], second["spec"]["job_id"]);
    assert_eq!(expect(api.get("/jobs").send().unwrap(), 200).as_array().unwrap().len(), 1);
}

#[test]
fn model_listing_and_download() {
    let api = serve();
    api.trained();
    let models = expect(api.get("/models").send().unwrap(), 200);
    let ed = models.as_array().unwrap().iter().find(|m| m["name"] == "ed").expect("model listed").clone();
    let version = ed["versions"][0]["id"].as_str().unwrap().to_string();

    let resp = api.get(&format!("/models/ed/download?version={version}")).send().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.headers()["content-type"], "application/octet-stream");
    let bytes = resp.bytes().unwrap().to_vec();
    let stored = api.gateway.platform.store().get(&ObjectKey::model("ed").unwrap(), None).unwrap();
    assert_eq!(bytes, stored);
    expect_error(api.get("/models/ed/download?version=00000099-000000000000").send().unwrap(), 404, "not_found");
    expect_error(api.get("/models/absent/download").send().unwrap(), 404, "not_found");
}

#[test]
fn instance_management() {
    let api = serve();
    let created = expect(api.post("/instances").send().unwrap(), 201);
    let id = created["instance_id"].as_str().unwrap().to_string();
    let reserved = expect(
        api.post("/instances").json(&json!({"capacity_slots": 2, "reserved_by": "nlp"})).send().unwrap(),
        201,
    );
    assert_eq!(reserved["reserved_by"], "nlp");
    expect_error(
        api.post("/instances").json(&json!({"capacity_slots": "two"})).send().unwrap(),
        400,
        "invalid_request",
    );
    let listed = expect(api.get("/instances").send().unwrap(), 200);
    assert!(listed.as_array().unwrap().iter().any(|i| i["instance_id"] == id.as_str()));
    let stopped = expect(api.http.delete(api.url(&format!("/instances/{id}"))).send().unwrap(), 200);
    assert!(["draining", "stopped"].contains(&stopped["state"].as_str().unwrap()), "{stopped}");

    // Fill the pool to its cap; the next manual create is refused.
    let cap = api.gateway.platform.config().pool.max_instances;
    loop {
        let resp = api.post("/instances").send().unwrap();
        if resp.status().as_u16() == 503 {
            expect_error(resp, 503, "capacity_exhausted");
            break;
        }
        expect(resp, 201);
        let live = api.gateway.platform.list_instances().iter().filter(|i| i.state != nluforge::scheduler::InstanceState::Stopped).count();
        assert!(live <= cap, "{live} live instances over a cap of {cap}");
    }
}
