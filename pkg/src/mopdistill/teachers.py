"""Behavior policies for offline dataset collection.

Three teachers: a uniform-random policy, a deterministic rule-based oracle
built around time-to-collision, and an optional chat-completion agent that
reasons with tools before emitting a meta-action. The oracle is the default
stand-in where a large hosted model is impractical.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .highway import (
    FASTER, IDLE, LANE_LEFT, LANE_RIGHT, LANE_WIDTH, META_ACTIONS, SLOWER,
    TARGET_SPEEDS, VEHICLE_LENGTH, EnvConfig, HighwayEnv,
)

TEACHER_KINDS = ("random", "scripted_oracle", "llm_agent")

ENV_BASE_URL = "RAPID_LLM_BASE_URL"
ENV_API_KEY = "RAPID_LLM_API_KEY"
ENV_MODEL = "RAPID_LLM_MODEL"
REQUEST_TIMEOUT = 60.0

MAX_TOOL_CALLS = 8
MAX_PARSE_RETRIES = 3
HISTORY_DEPTH = 3


class TeacherUnavailable(RuntimeError):
    pass


# -- observation parsing shared by oracle, tools, and prompts ---------------


def _present_rows(obs: np.ndarray) -> np.ndarray:
    return obs[obs[:, 0] == 1.0]


def _lane_of_y(y: float) -> int:
    return int(round(y / LANE_WIDTH))


def _lane_front_gap_and_lead(obs: np.ndarray, lane: int):
    """Bumper-to-bumper gap to the nearest leader in `lane`, and its speed."""
    ego = obs[0]
    best_gap, lead_speed = np.inf, None
    for row in _present_rows(obs)[1:]:
        if _lane_of_y(row[2]) != lane:
            continue
        dx = row[1] - ego[1]
        if dx > 0:
            gap = dx - VEHICLE_LENGTH
            if gap < best_gap:
                best_gap, lead_speed = gap, row[3]
    return best_gap, lead_speed


def _lane_rear_clear(obs: np.ndarray, lane: int, margin: float = 10.0) -> bool:
    ego = obs[0]
    for row in _present_rows(obs)[1:]:
        if _lane_of_y(row[2]) != lane:
            continue
        dx = row[1] - ego[1]
        if -margin < dx <= 0:
            return False
    return True


class RandomTeacher:
    kind = "random"

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def act(self, obs: np.ndarray) -> int:
        return int(self._rng.integers(0, len(META_ACTIONS)))


class ScriptedOracle:
    """Deterministic defensive-driving rules keyed on time-to-collision.

    TTC is the front gap divided by the closing speed; when there is no
    closing speed the fallback is gap / ego speed (time to cover the gap if
    the leader braked to a stop), so a leader sitting close ahead at equal
    speed still reads as dangerous. A short time headway (< 1 s) triggers
    the avoidance rule as well.
    """

    kind = "scripted_oracle"

    TTC_FAST = 8.0    # seconds; above this it is safe to speed up
    TTC_DANGER = 4.0  # seconds; below this we must react
    HEADWAY_DANGER = 1.0
    FRONT_GAP_SAFE = 20.0
    REAR_GAP_SAFE = 10.0

    def __init__(self, lanes: int):
        self.lanes = lanes

    def act(self, obs: np.ndarray) -> int:
        ego = obs[0]
        ego_lane = _lane_of_y(ego[2])
        ego_v = ego[3]
        gap, lead_v = _lane_front_gap_and_lead(obs, ego_lane)

        if lead_v is None:
            ttc = np.inf
            headway = np.inf
        else:
            closing = ego_v - lead_v
            if closing > 0:
                ttc = gap / closing
            else:
                ttc = gap / ego_v if ego_v > 0 else np.inf
            headway = gap / ego_v if ego_v > 0 else np.inf

        speed_index = int(np.clip(round(ego_v / 4.0), 0, len(TARGET_SPEEDS) - 1))
        danger = ttc < self.TTC_DANGER or headway < self.HEADWAY_DANGER

        if not danger and ttc > self.TTC_FAST and speed_index < len(TARGET_SPEEDS) - 1:
            return FASTER
        if danger:
            best_action, best_gap = None, self.FRONT_GAP_SAFE
            for lane, action in ((ego_lane - 1, LANE_LEFT), (ego_lane + 1, LANE_RIGHT)):
                if not 0 <= lane < self.lanes:
                    continue
                side_gap, _ = _lane_front_gap_and_lead(obs, lane)
                if side_gap > best_gap and _lane_rear_clear(obs, lane, self.REAR_GAP_SAFE):
                    best_action, best_gap = action, side_gap
            return best_action if best_action is not None else SLOWER
        return IDLE


# -- chat-completion agent ---------------------------------------------------


PREFIX_TEMPLATE = """You are a driving assistant controlling the ego car on a multi-lane highway.

## Task
Pick exactly one driving decision for the current frame. You may first call
perception tools to inspect the scene.

## Scenario
{scenario}

## Recent decisions
{history}

## Common sense rules
- Keep a safe distance to the car ahead; prefer changing lanes over hard braking.
- Do not change into a lane where a car is close behind or alongside.
- Drive as fast as is safe; the speed limit is 32 m/s.

## Tools
{tools}
Call a tool by replying with a single line: Action: <tool_name>(<argument>)

## Output format
When you have decided, reply with a single line:
Final decision: <one of lane_left, idle, lane_right, faster, slower>
"""

TOOL_DESCRIPTIONS = {
    "get_available_lanes": "get_available_lanes() -> lanes the ego car may move to",
    "check_action_safety": "check_action_safety(action) -> safety assessment for one meta-action",
    "get_lane_info": "get_lane_info(lane_index) -> nearest leader/follower in that lane",
}

_ACTION_WORD = re.compile("|".join(META_ACTIONS), re.IGNORECASE)
_TOOL_CALL = re.compile(r"Action:\s*(\w+)\s*\(([^)]*)\)", re.IGNORECASE)


@dataclass
class PromptBundle:
    lanes: int
    history: list[dict] = field(default_factory=list)  # ring buffer, newest last

    def push_history(self, action: str, explanation: str) -> None:
        self.history.append({"action": action, "explanation": explanation})
        del self.history[:-HISTORY_DEPTH]

    def render(self, obs: np.ndarray) -> str:
        return PREFIX_TEMPLATE.format(
            scenario=describe_scene(obs, self.lanes),
            history="\n".join(f"- {h['action']}: {h['explanation']}" for h in self.history)
            or "- none yet",
            tools="\n".join(f"- {d}" for d in TOOL_DESCRIPTIONS.values()),
        )


def describe_scene(obs: np.ndarray, lanes: int) -> str:
    ego = obs[0]
    parts = [f"The ego car drives at {ego[3]:.1f} m/s in lane "
             f"{_lane_of_y(ego[2])} of {lanes} (lane 0 is leftmost)."]
    for i, row in enumerate(_present_rows(obs)[1:], start=1):
        dx = row[1] - ego[1]
        where = "ahead" if dx >= 0 else "behind"
        parts.append(f"Vehicle {i} is {abs(dx):.1f} m {where} in lane "
                     f"{_lane_of_y(row[2])} at {row[3]:.1f} m/s.")
    return " ".join(parts)


def run_tool(name: str, argument: str, obs: np.ndarray, lanes: int) -> str:
    ego_lane = _lane_of_y(obs[0][2])
    if name == "get_available_lanes":
        avail = [la for la in (ego_lane - 1, ego_lane + 1) if 0 <= la < lanes]
        return (f"Ego is in lane {ego_lane}. Reachable adjacent lanes: {avail}."
                if avail else f"Ego is in lane {ego_lane}; no adjacent lane exists.")
    if name == "get_lane_info":
        try:
            lane = int(argument.strip())
        except ValueError:
            return f"error: get_lane_info expects a lane index, got {argument!r}"
        if not 0 <= lane < lanes:
            return f"error: lane {lane} does not exist (0..{lanes - 1})"
        gap, lead_v = _lane_front_gap_and_lead(obs, lane)
        front = ("no vehicle ahead" if lead_v is None
                 else f"leader {gap:.1f} m ahead at {lead_v:.1f} m/s")
        rear = "clear behind" if _lane_rear_clear(obs, lane) else "a vehicle is close behind"
        return f"Lane {lane}: {front}; {rear}."
    if name == "check_action_safety":
        action = argument.strip().strip("'\"").lower()
        if action not in META_ACTIONS:
            return f"error: unknown action {argument!r}"
        target_lane = ego_lane + {"lane_left": -1, "lane_right": 1}.get(action, 0)
        if not 0 <= target_lane < lanes:
            return f"{action} is unavailable: no such lane."
        gap, lead_v = _lane_front_gap_and_lead(obs, target_lane)
        rear_ok = _lane_rear_clear(obs, target_lane)
        verdict = "looks safe" if (gap > 20.0 and rear_ok) else "risky"
        front = "open road" if lead_v is None else f"front gap {gap:.1f} m"
        return f"{action}: {front}, rear {'clear' if rear_ok else 'occupied'} -> {verdict}."
    return f"error: unknown tool {name!r}"


def parse_final_decision(text: str) -> int | None:
    """Return the action index iff exactly one distinct meta-action
    token appears (case-insensitive); otherwise None."""
    found = {m.lower() for m in _ACTION_WORD.findall(text)}
    if len(found) != 1:
        return None
    return META_ACTIONS.index(found.pop())


class ChatEndpoint:
    """Minimal chat-completion client (JSON over HTTP)."""

    def __init__(self, base_url: str, api_key: str = "", model: str = "",
                 timeout: float = REQUEST_TIMEOUT):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout

    @classmethod
    def from_environment(cls) -> "ChatEndpoint":
        base = os.environ.get(ENV_BASE_URL)
        if not base:
            raise TeacherUnavailable(
                f"llm_agent teacher needs {ENV_BASE_URL} (and optionally "
                f"{ENV_API_KEY}, {ENV_MODEL}) in the environment")
        return cls(base, os.environ.get(ENV_API_KEY, ""),
                   os.environ.get(ENV_MODEL, ""))

    def complete(self, messages: list[dict]) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(f"{self.base_url}/chat/completions",
                                 json={"model": self.model, "messages": messages},
                                 headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except Exception as e:  # surfaced to the caller with context
            raise TeacherUnavailable(f"chat endpoint failed: {e}") from e


class LLMTeacher:
    """Reason-act loop over a chat endpoint; falls back to idle when the
    reply never parses to a single action."""

    kind = "llm_agent"

    def __init__(self, lanes: int, endpoint=None, transcript_path=None):
        self.endpoint = endpoint or ChatEndpoint.from_environment()
        self.bundle = PromptBundle(lanes=lanes)
        self.lanes = lanes
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.last_transcript: dict | None = None

    def act(self, obs: np.ndarray) -> int:
        action, transcript = self.decide(obs)
        return action

    def decide(self, obs: np.ndarray) -> tuple[int, dict]:
        messages = [{"role": "system", "content": self.bundle.render(obs)},
                    {"role": "user", "content": "Decide the next action."}]
        tool_calls = 0
        parse_failures = 0
        fallback = False
        action = None
        while True:
            reply = self.endpoint.complete(messages)
            messages.append({"role": "assistant", "content": reply})
            call = _TOOL_CALL.search(reply)
            if call and tool_calls < MAX_TOOL_CALLS:
                tool_calls += 1
                result = run_tool(call.group(1), call.group(2), obs, self.lanes)
                messages.append({"role": "user", "content": f"Observation: {result}"})
                continue
            action = parse_final_decision(reply)
            if action is not None:
                break
            parse_failures += 1
            if parse_failures >= MAX_PARSE_RETRIES:
                action = IDLE
                fallback = True
                break
            messages.append({"role": "user", "content":
                             "Could not parse that. Reply with exactly one line: "
                             "Final decision: <action>"})
        transcript = {"messages": messages, "tool_calls": tool_calls,
                      "parse_failures": parse_failures, "fallback": fallback,
                      "action": META_ACTIONS[action]}
        self.last_transcript = transcript
        self.bundle.push_history(META_ACTIONS[action],
                                 messages[-1]["content"][:200] if messages else "")
        if self.transcript_path:
            with open(self.transcript_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(transcript) + "\n")
        return action, transcript


def make_teacher(kind: str, env_config: EnvConfig, seed: int = 0,
                 transcript_path=None):
    if kind == "random":
        return RandomTeacher(seed=np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    if kind == "scripted_oracle":
        return ScriptedOracle(lanes=env_config.lanes)
    if kind == "llm_agent":
        return LLMTeacher(lanes=env_config.lanes, transcript_path=transcript_path)
    raise ValueError(f"unknown teacher kind {kind!r}; known: {TEACHER_KINDS}")


def episode_seed(master_seed: int, episode: int) -> int:
    """Deterministic per-episode environment seed, recorded via the dataset
    manifest's seed so trajectories can be replayed."""
    return int(np.random.SeedSequence([master_seed, 0, episode]).generate_state(1)[0])


def collect_rollouts(env_config: EnvConfig, teacher, n_transitions: int,
                     seed: int) -> data.Dataset:
    """Closed-loop collection of exactly `n_transitions` (s, a, r, s', done)
    tuples; the final episode is truncated if needed."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    env = HighwayEnv(env_config)
    transitions: list[data.Transition] = []
    episode = 0
    while len(transitions) < n_transitions:
        obs = env.reset(seed=episode_seed(seed, episode))
        while not env.done and len(transitions) < n_transitions:
            action = teacher.act(obs)
            result = env.step(action)
            transitions.append(data.Transition(
                s=obs.copy(), a=action, r=result.reward,
                s_next=result.observation.copy(), done=result.done))
            obs = result.observation
        episode += 1
    return data.Dataset.from_transitions(
        {"env_id": env_config.env_id, "source": teacher.kind, "seed": seed},
        transitions)


def replay_transitions(dataset: data.Dataset, env_config: EnvConfig,
                       indices) -> int:
    """Re-simulate the episodes containing `indices` and verify the stored
    (s, a, r, s') content against the simulator. Returns how many of the
    requested transitions were checked; raises AssertionError on mismatch."""
    episode_starts = [0]
    for i in range(len(dataset) - 1):
        if dataset.done[i]:
            episode_starts.append(i + 1)

    wanted = set(int(i) for i in indices)
    env = HighwayEnv(env_config)
    checked = 0
    for ep, start in enumerate(episode_starts):
        end = episode_starts[ep + 1] if ep + 1 < len(episode_starts) else len(dataset)
        if not wanted.intersection(range(start, end)):
            continue
        obs = env.reset(seed=episode_seed(dataset.manifest.seed, ep))
        for i in range(start, end):
            assert np.array_equal(obs, dataset.s[i]), f"state mismatch at {i}"
            result = env.step(int(dataset.a[i]))
            assert result.reward == dataset.r[i], f"reward mismatch at {i}"
            assert np.array_equal(result.observation, dataset.s_next[i]), \
                f"next-state mismatch at {i}"
            assert result.done == bool(dataset.done[i]), f"done mismatch at {i}"
            obs = result.observation
            if i in wanted:
                checked += 1
    return checked
