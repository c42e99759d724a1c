import base64
import json
import threading
import urllib.request

import pytest

from fluxsim.api import (
    ApiError,
    ApiRequest,
    EngineDriver,
    TenancyApi,
    TokenStore,
    basic_credentials,
    bearer,
    make_server,
)
from fluxsim.model import AuthMode, ValidationError, hash_password

from conftest import bring_up, make_cluster, settle

USERS = (("alice", hash_password("wonderland")), ("bob", hash_password("builder")))

# sizes sent both through the cluster's own resize call and through PATCH
RESIZE_VECTOR = [0, -1, 5, 9, 2.5, "4", True, None, 1, 4, 3]


def api_for(auth_mode=AuthMode.MULTI_USER, users=USERS, ttl=3600.0, up=True):
    c = make_cluster(2, 4, auth_mode=auth_mode, users=users)
    if up:
        bring_up(c)
    return c, TenancyApi(c, ttl=ttl)


def login(api, user, password):
    resp = api.handle(ApiRequest("POST", "/v1/auth/token", {"Authorization": basic_credentials(user, password)}))
    assert resp.status == 200, resp
    return {"Authorization": bearer(resp.body["token"])}


def test_basic_credentials_encoding():
    assert basic_credentials("alice", "pw") == "Basic " + base64.b64encode(b"alice:pw").decode()


def test_token_store_expiry_on_sim_clock():
    now = [0.0]
    store = TokenStore(lambda: now[0], ttl=10)
    tok = store.issue("alice")
    assert store.check(tok.token) == "alice"
    now[0] = 10.0
    with pytest.raises(ApiError) as exc:
        store.check(tok.token)
    assert (exc.value.status, exc.value.code) == (401, "token_expired")
    with pytest.raises(ApiError) as exc:
        store.check("nonsense")
    assert exc.value.code == "invalid_token"


def test_login_and_submit():
    c, api = api_for()
    hdr = login(api, "alice", "wonderland")
    resp = api.handle(ApiRequest("POST", "/v1/jobs", hdr, {"nodes": 2, "work_units": 10}))
    assert resp.status == 201 and resp.body["job_id"] == 1
    got = api.handle(ApiRequest("GET", "/v1/jobs/1", hdr))
    assert got.body["user"] == "alice"


@pytest.mark.parametrize("user,password", [("alice", "nope"), ("mallory", "x"), ("", "")])
def test_bad_credentials(user, password):
    _, api = api_for()
    resp = api.handle(ApiRequest("POST", "/v1/auth/token", {"Authorization": basic_credentials(user, password)}))
    assert (resp.status, resp.body["error"]) == (401, "invalid_credentials")


def test_garbage_basic_header():
    _, api = api_for()
    resp = api.handle(ApiRequest("POST", "/v1/auth/token", {"Authorization": "Basic !!!"}))
    assert resp.status == 401


def test_expired_token_replay_is_401():
    c, api = api_for(ttl=60)
    hdr = login(api, "alice", "wonderland")
    assert api.handle(ApiRequest("GET", "/v1/jobs", hdr)).status == 200
    c.engine.advance(c.engine.now + 61)
    resp = api.handle(ApiRequest("GET", "/v1/jobs", hdr))
    assert (resp.status, resp.body["error"]) == (401, "token_expired")


def test_missing_token():
    _, api = api_for()
    assert api.handle(ApiRequest("GET", "/v1/jobs")).status == 401


def test_cross_user_cancel_is_403():
    c, api = api_for()
    alice = login(api, "alice", "wonderland")
    bob = login(api, "bob", "builder")
    job_id = api.handle(ApiRequest("POST", "/v1/jobs", alice, {"nodes": 2, "work_units": 1000})).body["job_id"]
    resp = api.handle(ApiRequest("DELETE", f"/v1/jobs/{job_id}", bob))
    assert (resp.status, resp.body["error"]) == (403, "not_owner")
    assert api.handle(ApiRequest("DELETE", f"/v1/jobs/{job_id}", alice)).body["state"] == "canceled"
    again = api.handle(ApiRequest("DELETE", f"/v1/jobs/{job_id}", alice))
    assert (again.status, again.body["error"]) == (409, "job_finished")


def test_unknown_job_and_route():
    _, api = api_for()
    hdr = login(api, "alice", "wonderland")
    assert api.handle(ApiRequest("GET", "/v1/jobs/77", hdr)).status == 404
    assert api.handle(ApiRequest("GET", "/v1/jobs/abc", hdr)).status == 404
    assert api.handle(ApiRequest("GET", "/v2/nothing", hdr)).status == 404
    assert api.handle(ApiRequest("PUT", "/v1/jobs", hdr)).status == 405


@pytest.mark.parametrize("body", [None, [], {"nodes": 0}, {"nodes": 1, "user": "bob"}, {"nodes": "two"},
                                  {"tasks_per_node": 1}])
def test_bad_job_bodies(body):
    _, api = api_for()
    hdr = login(api, "alice", "wonderland")
    assert api.handle(ApiRequest("POST", "/v1/jobs", hdr, body)).status == 400


def test_lead_not_ready_is_503():
    c, api = api_for(up=False)
    hdr = login(api, "alice", "wonderland")
    assert api.handle(ApiRequest("POST", "/v1/jobs", hdr, {"nodes": 1})).status == 503
    assert api.handle(ApiRequest("GET", "/v1/metrics")).status == 503


def test_single_user_mode_keeps_only_the_first_user():
    _, api = api_for(AuthMode.SINGLE_USER)
    login(api, "alice", "wonderland")
    resp = api.handle(ApiRequest("POST", "/v1/auth/token", {"Authorization": basic_credentials("bob", "builder")}))
    assert resp.status == 401


def test_auth_disabled_without_users():
    c, api = api_for(AuthMode.SINGLE_USER, users=())
    assert api.handle(ApiRequest("POST", "/v1/auth/token")).status == 403
    resp = api.handle(ApiRequest("POST", "/v1/jobs", {}, {"nodes": 1}))
    assert resp.status == 201
    assert api.handle(ApiRequest("DELETE", f"/v1/jobs/{resp.body['job_id']}")).status == 200


def test_metrics_are_public():
    c, api = api_for()
    hdr = login(api, "alice", "wonderland")
    for _ in range(3):
        api.handle(ApiRequest("POST", "/v1/jobs", hdr, {"nodes": 2, "work_units": 1000}))
    body = api.handle(ApiRequest("GET", "/v1/metrics")).body
    assert body["pending_node_demand"] == 4 and body["queue_length"] == 2


def direct_outcome(c, size):
    try:
        return ("ok", c.request_resize(size, "user").size)
    except ValidationError as exc:
        return ("rejected", tuple(exc.codes))


def patch_outcome(api, hdr, size):
    resp = api.handle(ApiRequest("PATCH", "/v1/cluster/size", hdr, {"size": size}))
    if resp.status == 200:
        return ("ok", resp.body["size"])
    assert (resp.status, resp.body["error"]) == (409, "resize_rejected")
    return ("rejected", tuple(resp.body["detail"].split(",")))


def test_patch_and_direct_resize_agree():
    c1, _ = api_for()
    c2, api = api_for()
    hdr = login(api, "alice", "wonderland")
    direct = [direct_outcome(c1, s) for s in RESIZE_VECTOR]
    patched = [patch_outcome(api, hdr, s) for s in RESIZE_VECTOR]
    assert direct == patched
    assert [o for o, _ in direct].count("ok") == 3
    settle(c2)
    assert sorted(c2.pods) == [0, 1, 2]
    sources = {src for _, _, src, _ in c2.resize_log}
    assert sources == {"api"}


def test_resize_body_must_have_size():
    _, api = api_for()
    hdr = login(api, "alice", "wonderland")
    assert api.handle(ApiRequest("PATCH", "/v1/cluster/size", hdr, {"nodes": 3})).status == 400


def test_http_server_roundtrip():
    c, api = api_for(AuthMode.SINGLE_USER, users=(), up=False)
    api.inline = False
    c.start()
    driver = EngineDriver(c.engine, speed=100.0, tick=0.01)
    driver.start()
    server = make_server(api, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}"
        deadline = 0
        while deadline < 500:
            try:
                with urllib.request.urlopen(url + "/v1/metrics") as r:
                    body = json.loads(r.read())
                    break
            except urllib.error.HTTPError as exc:
                assert exc.code == 503
                deadline += 1
                threading.Event().wait(0.01)
        assert body["queue_length"] == 0
        req = urllib.request.Request(url + "/v1/jobs", data=json.dumps({"nodes": 1}).encode(), method="POST")
        with urllib.request.urlopen(req) as r:
            assert r.status == 201
    finally:
        server.shutdown()
        server.server_close()
        driver.halt.set()
        driver.join()
