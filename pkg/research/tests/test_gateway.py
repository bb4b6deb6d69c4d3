import json

import pytest
import requests

from research.exceptions import ConfigurationError, GatewayUnavailable, MalformedReply
from research.gateway import GatewayConfig, LlmGateway, prompt_key

HYPOTHESIS = {
    "action": "factor",
    "hypothesis": "short-term reversal",
    "reason": "prices overshoot",
    "factors": [{"name": "REV5", "description": "reversal", "formula": "Ref($close, 5)/$close"}],
}
ENDPOINT = "http://gateway.test/v1/chat/completions"


class FakeResponse:
    def __init__(self, status=200, body=None, text=None):
        self.status_code = status
        self.body = body
        self.text = text if text is not None else json.dumps(body)

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"{self.status_code} error")

    def json(self):
        if self.body is None:
            raise requests.JSONDecodeError("Expecting value", self.text, 0)
        return self.body


def chat(content, usage=None):
    body = {"choices": [{"message": {"content": content}}]}
    if usage is not None:
        body["usage"] = usage
    return FakeResponse(body=body)


class FakeSession:
    """Plays back responses or raises the exceptions queued in `outcomes`."""

    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0) if len(self.outcomes) > 1 else self.outcomes[0]
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def gateway(session, **overrides):
    values = {"endpoint": ENDPOINT, "retries": 2}
    values.update(overrides)
    return LlmGateway(GatewayConfig(**values), session=session)


def test_generate_parses_a_valid_reply():
    session = FakeSession(chat(json.dumps(HYPOTHESIS), {"prompt_tokens": 12, "completion_tokens": 30}))
    client = gateway(session, temperature=0.8, max_tokens=256)

    reply = client.generate("propose something", "hypothesis")

    assert reply["action"] == "factor"
    assert reply["factors"][0]["formula"] == "Ref($close, 5)/$close"
    body = session.calls[0]["json"]
    assert body["temperature"] == 0.8
    assert body["max_tokens"] == 256
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    assert body["messages"][1]["content"] == "propose something"
    assert client.tokens.to_dict() == {"requests": 1, "prompt_tokens": 12, "completion_tokens": 30}


def test_fenced_json_is_accepted():
    fenced = "```json\n" + json.dumps({"formula": "Mean($close, 5)"}) + "\n```"

    reply = gateway(FakeSession(chat(fenced))).generate("implement", "factor_implementation")

    assert reply == {"formula": "Mean($close, 5)"}


def test_bearer_token_comes_from_the_named_variable(monkeypatch):
    monkeypatch.setenv("ALPHALOOP_TEST_TOKEN", "secret")
    session = FakeSession(chat(json.dumps({"action": "model"})))

    gateway(session, token_env="ALPHALOOP_TEST_TOKEN").generate("choose", "action")

    assert session.calls[0]["headers"]["Authorization"] == "Bearer secret"


def test_unreachable_endpoint_tries_retries_plus_one_times():
    session = FakeSession(requests.ConnectionError("refused"))

    with pytest.raises(GatewayUnavailable):
        gateway(session, retries=2).generate("hello", "action")

    assert len(session.calls) == 3


def test_transient_failure_recovers():
    session = FakeSession(FakeResponse(status=503), chat(json.dumps({"action": "factor"})))

    assert gateway(session).generate("choose", "action")["action"] == "factor"
    assert len(session.calls) == 2


def test_schema_violation_gets_one_reformat_request():
    broken = dict(HYPOTHESIS)
    del broken["action"]
    session = FakeSession(chat(json.dumps(broken)), chat(json.dumps(HYPOTHESIS)))

    reply = gateway(session).generate("propose", "hypothesis")

    assert reply["action"] == "factor"
    retry = session.calls[1]["json"]["messages"][1]["content"]
    assert "action" in retry
    assert "hypothesis reply" in retry


def test_missing_action_after_retry_is_malformed():
    broken = json.dumps({key: v for key, v in HYPOTHESIS.items() if key != "action"})
    session = FakeSession(chat(broken))

    with pytest.raises(MalformedReply) as excinfo:
        gateway(session).generate("propose", "hypothesis")

    assert excinfo.value.raw == broken
    assert len(session.calls) == 2


def test_unparseable_formula_is_rejected():
    session = FakeSession(chat(json.dumps({"formula": "Mean($close"})))

    with pytest.raises(MalformedReply):
        gateway(session).generate("implement", "factor_implementation")


def test_unexpected_body_is_malformed():
    session = FakeSession(FakeResponse(body={"error": "nope"}))

    with pytest.raises(MalformedReply):
        gateway(session).generate("hello", "action")


def test_non_json_body_is_malformed_without_retries():
    session = FakeSession(FakeResponse(text="<html>upstream error</html>"))

    with pytest.raises(MalformedReply) as excinfo:
        gateway(session, retries=2).generate("hello", "action")

    assert excinfo.value.raw == "<html>upstream error</html>"
    assert len(session.calls) == 1


@pytest.mark.parametrize(
    "reply",
    [
        {
            **HYPOTHESIS,
            "factors": [HYPOTHESIS["factors"][0], {**HYPOTHESIS["factors"][0], "formula": "$close"}],
        },
        {
            "action": "model",
            "hypothesis": "heavier shrinkage",
            "reason": "noisy factors",
            "model": {"description": "ridge", "feature_transform": "none", "lookback": 1, "ridge_grid": [-1]},
        },
    ],
    ids=["duplicate-factor-names", "negative-ridge"],
)
def test_unusable_hypothesis_reply_is_malformed(reply):
    session = FakeSession(chat(json.dumps(reply)))

    with pytest.raises(MalformedReply):
        gateway(session).generate("propose", "hypothesis")

    assert len(session.calls) == 2


def test_unknown_schema():
    with pytest.raises(ConfigurationError):
        gateway(FakeSession(chat("{}"))).generate("hello", "poem")


def test_replay_serves_recorded_replies(tmp_path):
    prompt = "propose a factor"
    recorded = {"prompt": prompt, "content": json.dumps(HYPOTHESIS), "usage": {"prompt_tokens": 5}}
    (tmp_path / f"{prompt_key(prompt)}.json").write_text(json.dumps(recorded))
    client = LlmGateway(GatewayConfig(mode="replay", replay_dir=str(tmp_path)), session=FakeSession())

    reply = client.generate(prompt, "hypothesis")

    assert reply["hypothesis"] == "short-term reversal"
    assert client.tokens.prompt_tokens == 5
    with pytest.raises(GatewayUnavailable):
        client.generate("never recorded", "hypothesis")


def test_record_then_replay(tmp_path):
    recorder = gateway(
        FakeSession(chat(json.dumps(HYPOTHESIS))), mode="record", replay_dir=str(tmp_path)
    )
    live = recorder.generate("propose", "hypothesis")

    player = LlmGateway(GatewayConfig(mode="replay", replay_dir=str(tmp_path)))

    assert player.generate("propose", "hypothesis") == live
    assert (tmp_path / f"{prompt_key('propose')}.json").is_file()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GatewayConfig(timeout=0)
    with pytest.raises(ConfigurationError):
        GatewayConfig(retries=-1)
    with pytest.raises(ConfigurationError):
        GatewayConfig(mode="stream")
    with pytest.raises(ConfigurationError):
        GatewayConfig().check_ready()
    with pytest.raises(ConfigurationError):
        GatewayConfig(mode="replay").check_ready()
    GatewayConfig(endpoint=ENDPOINT).check_ready()


def test_config_from_settings(settings):
    settings.LLM_GATEWAY = {**settings.LLM_GATEWAY, "ENDPOINT": ENDPOINT, "RETRIES": 4}

    config = GatewayConfig.from_settings()

    assert config.endpoint == ENDPOINT
    assert config.retries == 4
