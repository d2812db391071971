"""Tests for marlcomm.evaluation."""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from marlcomm import envs
from marlcomm.agents import init_team
from marlcomm.envs.find_goal import REGIONS
from marlcomm.evaluation import (
    DUMP_COLUMNS,
    MESSAGE_COLUMNS,
    EpisodeResult,
    breakdown_from_results,
    build_probe_dataset,
    capture_breakdown,
    collect_probe_samples,
    crossplay_cell,
    crossplay_cells,
    crossplay_compositions,
    crossplay_eval,
    crossplay_pair,
    dump_messages,
    dump_trajectories,
    episode_seeds,
    evaluate_team,
    goal_distance_similarity,
    message_set_similarity,
    mixed_team,
    play_episodes,
    protocol_symmetry,
    protocol_symmetry_from_observations,
    train_probe,
)


def _synthetic_samples(rng: np.random.Generator, n: int, task: str) -> pd.DataFrame:
    """Messages that encode the label: visibility in m1, region as a rough one-hot."""
    rows = []
    for k in range(n):
        visible = task == "location" or bool(k % 3)
        region = REGIONS[k % len(REGIONS)]
        if task == "visibility":
            m = rng.uniform(0.4, 0.6, size=4)
            m[0] = rng.uniform(0.8, 1.0) if visible else rng.uniform(0.0, 0.2)
        else:
            center = np.full(4, 0.05)
            idx = REGIONS.index(region)
            if idx < 4:
                center[idx] = 0.95
            m = np.clip(center + rng.normal(scale=0.03, size=4), 0.01, 0.99)
        rows.append(
            {
                "episode": 0,
                "t": k,
                "agent": 0,
                **dict(zip(MESSAGE_COLUMNS, m.tolist())),
                "goal_visible": visible,
                "other_agent_visible": False,
                "goal_region": region,
            }
        )
    return pd.DataFrame(rows, columns=list(DUMP_COLUMNS))


class TestPlayback:
    def test_evaluate_team_summary(self, pp_team, tiny_pp_config):
        summary = evaluate_team(pp_team, tiny_pp_config, episodes=3, seed=0)
        assert len(summary.episodes) == 3
        assert all(1 <= e.length <= 12 for e in summary.episodes)
        row = summary.as_row()
        total = row["no_prey"] + row["one_prey"] + row["two_prey"]
        assert total == pytest.approx(100.0)

    def test_same_seed_same_episodes(self, pp_team, tiny_pp_config):
        a = evaluate_team(pp_team, tiny_pp_config, episodes=2, seed=4)
        b = evaluate_team(pp_team, tiny_pp_config, episodes=2, seed=4)
        assert a.episodes == b.episodes

    def test_team_env_mismatch(self, fg_team, tiny_pp_config, fg_config):
        with pytest.raises(ValueError, match="cannot play"):
            play_episodes(fg_team, tiny_pp_config, 1, 0)
        other = replace(fg_config, env_id="predator_prey", grid_size=7)
        with pytest.raises(ValueError, match="trained on"):
            play_episodes(fg_team, other, 1, 0)

    def test_breakdown(self):
        results = [EpisodeResult(0.0, 5, False, c) for c in (0, 1, 1, 2)]
        assert breakdown_from_results(results) == {
            "no_prey": 25.0,
            "one_prey": 50.0,
            "two_prey": 25.0,
        }
        with pytest.raises(ValueError, match="at least one"):
            breakdown_from_results([])

    def test_capture_breakdown_needs_predator_prey(self, fg_team, fg_config):
        with pytest.raises(ValueError, match="predator_prey"):
            capture_breakdown(fg_team, fg_config, episodes=1)


class TestProtocolSymmetry:
    def test_identical_agents(self, tiny_pp_config):
        agent = init_team(tiny_pp_config, "cacl", seed=0)[0]
        team = [agent.copy() for _ in range(tiny_pp_config.n_agents)]
        assert protocol_symmetry(team, tiny_pp_config, episodes=1) == pytest.approx(1.0)

    def test_orthogonal_protocols(self):
        def fixed(vector):
            return lambda obs: np.tile(vector, (len(obs), 1))

        fns = [fixed(np.array([1.0, 0, 0, 0])), fixed(np.array([0, 1.0, 0, 0]))]
        observations = np.zeros((5, 2, 3))
        value = protocol_symmetry_from_observations(fns, observations)
        assert value == pytest.approx(0.0)

    def test_inactive_observers_skipped(self):
        fns = [lambda obs: obs, lambda obs: obs + np.array([0.0, 1.0])]
        observations = np.tile(np.array([1.0, 0.0]), (2, 2, 1))
        active = np.array([[True, False], [True, False]])
        # only agent 0's observations count: cos((1, 1), (1, 0))
        value = protocol_symmetry_from_observations(fns, observations, active)
        assert value == pytest.approx(1 / np.sqrt(2))
        with pytest.raises(ValueError, match="no active"):
            protocol_symmetry_from_observations(
                fns, observations, np.zeros((2, 2), bool)
            )

    def test_random_team_in_range(self, pp_team, tiny_pp_config):
        value = protocol_symmetry(pp_team, tiny_pp_config, episodes=1)
        assert 0.0 < value <= 1.0

    def test_iac_rejected(self, tiny_pp_config):
        team = init_team(tiny_pp_config, "iac", seed=0)
        with pytest.raises(ValueError, match="IAC"):
            protocol_symmetry(team, tiny_pp_config, episodes=1)


class TestExports:
    def test_dump_messages(self, tmp_path, pp_team, tiny_pp_config):
        summary = evaluate_team(pp_team, tiny_pp_config, 2, seed=1)
        lengths = [e.length for e in summary.episodes]
        frame = dump_messages(
            pp_team, tiny_pp_config, 2, seed=1, path=tmp_path / "m.csv"
        )
        assert list(frame.columns) == list(DUMP_COLUMNS)
        assert len(frame) == 4 * sum(lengths)
        values = frame[list(MESSAGE_COLUMNS)].to_numpy()
        assert np.all((values > 0) & (values < 1))
        on_disk = pd.read_csv(tmp_path / "m.csv", float_precision="round_trip")
        np.testing.assert_array_equal(on_disk[list(MESSAGE_COLUMNS)].to_numpy(), values)

    def test_dump_trajectories(self, tmp_path, pp_team, tiny_pp_config):
        summary = evaluate_team(pp_team, tiny_pp_config, 2, seed=1)
        lengths = [e.length for e in summary.episodes]
        path = tmp_path / "traj.jsonl"
        count = dump_trajectories(pp_team, tiny_pp_config, 2, seed=1, path=path)
        assert count == sum(lengths)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == count
        assert records[0]["t"] == 0
        assert len(records[0]["messages"]) == 4
        assert {"predators", "prey"} <= set(records[0]["state"])
        first_episode = [r["t"] for r in records if r["episode"] == 0]
        assert first_episode == list(range(lengths[0]))

    def test_dump_trajectories_starts_from_reset_layout(
        self, tmp_path, pp_team, tiny_pp_config
    ):
        path = tmp_path / "traj.jsonl"
        dump_trajectories(pp_team, tiny_pp_config, 1, seed=1, path=path)
        first = json.loads(path.read_text().splitlines()[0])
        state, obs = envs.reset(tiny_pp_config, seed=episode_seeds(1, 1)[0])
        assert first["state"] == json.loads(json.dumps(envs.state_summary(state)))
        np.testing.assert_allclose(first["observations"], obs)


class TestProbe:
    def test_balanced_split(self):
        samples = _synthetic_samples(np.random.default_rng(0), 150, "visibility")
        dataset = build_probe_dataset(samples, "visibility", seed=0)
        # 50 hidden, 100 visible -> 50 per class, 35 train / 15 test each
        assert dataset.n_per_class == 50
        assert np.bincount(dataset.y_train).tolist() == [35, 35]
        assert np.bincount(dataset.y_test).tolist() == [15, 15]

    def test_location_keeps_goal_visible_only(self):
        samples = _synthetic_samples(np.random.default_rng(0), 100, "location")
        samples.loc[:9, "goal_visible"] = False
        dataset = build_probe_dataset(samples, "location")
        assert dataset.classes == REGIONS
        assert len(dataset.y_train) + len(dataset.y_test) == 5 * 18

    def test_missing_class(self):
        samples = _synthetic_samples(np.random.default_rng(0), 50, "location")
        samples = samples[samples["goal_region"] != "Middle"]
        with pytest.raises(ValueError, match="Middle"):
            build_probe_dataset(samples, "location")

    def test_unknown_task(self):
        samples = _synthetic_samples(np.random.default_rng(0), 10, "visibility")
        with pytest.raises(ValueError, match="task must be"):
            build_probe_dataset(samples, "color")

    @pytest.mark.parametrize("task, depth", [("visibility", 1), ("location", 2)])
    def test_separable_messages(self, task, depth):
        samples = _synthetic_samples(np.random.default_rng(1), 300, task)
        result = train_probe(build_probe_dataset(samples, task, seed=0), depth=depth)
        assert result.accuracy > 0.95
        assert result.depth == depth

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(2)
        samples = _synthetic_samples(rng, 300, "visibility")
        samples["goal_visible"] = rng.permutation(samples["goal_visible"].to_numpy())
        dataset = build_probe_dataset(samples, "visibility")
        result = train_probe(dataset, depth=2, epochs=50)
        assert result.accuracy < 0.75

    def test_probe_needs_find_goal(self, pp_team, tiny_pp_config):
        with pytest.raises(ValueError, match="find_goal"):
            collect_probe_samples(pp_team, tiny_pp_config, episodes=1)

    def test_bad_depth(self):
        samples = _synthetic_samples(np.random.default_rng(0), 30, "visibility")
        with pytest.raises(ValueError, match="depth"):
            train_probe(build_probe_dataset(samples, "visibility"), depth=3)


class TestGoalSimilarity:
    def test_set_similarity(self):
        a = np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0]])
        assert message_set_similarity(a, a) == pytest.approx(1.0)
        b = np.array([[0, 1.0, 0, 0]])
        assert message_set_similarity(a, b) == pytest.approx(0.0)
        assert message_set_similarity(a, np.zeros((0, 4))) is None

    def test_out_of_grid_anchors_missing(self, fg_team, fg_config):
        out = goal_distance_similarity(fg_team, fg_config, episodes=1)
        assert set(out) == {(5, 5), (9, 9), (13, 13)}
        assert out[(9, 9)] is None
        assert out[(13, 13)] is None
        assert out[(5, 5)] is None or 0.0 < out[(5, 5)] <= 1.0

    def test_needs_find_goal(self, pp_team, tiny_pp_config):
        with pytest.raises(ValueError, match="find_goal"):
            goal_distance_similarity(pp_team, tiny_pp_config, episodes=1)


class TestCrossplay:
    def test_compositions(self):
        rng = np.random.default_rng(0)
        (even,) = crossplay_compositions(4, rng)
        assert len(even) == 2
        majority, minority = crossplay_compositions(3, rng)
        assert (len(majority), len(minority)) == (2, 1)

    def test_mixed_team(self, tiny_pp_config):
        a = init_team(tiny_pp_config, "cacl", seed=0)
        b = init_team(tiny_pp_config, "dial", seed=1)
        mixed = mixed_team(a, b, (1, 3))
        assert [p.spec.method for p in mixed] == ["dial", "cacl", "dial", "cacl"]

    def test_self_pairing_equals_evaluation(self, pp_team, tiny_pp_config):
        score, _ = crossplay_pair(pp_team, pp_team, tiny_pp_config, seed=9, episodes=2)
        expected = evaluate_team(pp_team, tiny_pp_config, episodes=2, seed=9)
        assert score == pytest.approx(expected.mean_ep_reward)

    def test_intra_method_pairs_distinct_teams(self, tiny_pp_config):
        teams = [init_team(tiny_pp_config, "cacl", seed=s) for s in range(3)]
        row, pairings = crossplay_cell(
            "cacl",
            teams,
            "cacl",
            teams,
            tiny_pp_config,
            (0, 0, 0),
            pairings=4,
            episodes=1,
        )
        assert all(p.team_a != p.team_b for p in pairings)
        assert row["pairings"] == 4
        assert row["episodes"] == 4
        assert row["metric"] == "mean_ep_reward"
        assert row["sd"] >= 0.0

    def test_needs_two_teams(self, pp_team, tiny_pp_config):
        with pytest.raises(ValueError, match=">= 2 independently trained teams"):
            crossplay_cell("cacl", [pp_team], "cacl", [pp_team], tiny_pp_config, (0,))
        with pytest.raises(ValueError, match="cacl"):
            crossplay_eval(
                {"cacl": [pp_team], "iac": [pp_team, pp_team]}, tiny_pp_config
            )

    def test_table(self, tiny_pp_config):
        teams = {
            "cacl": [init_team(tiny_pp_config, "cacl", seed=s) for s in (0, 1)],
            "iac": [init_team(tiny_pp_config, "iac", seed=s) for s in (0, 1)],
        }
        table = crossplay_eval(teams, tiny_pp_config, pairings=2, episodes=1)
        assert list(zip(table["method_a"], table["method_b"])) == [
            ("cacl", "cacl"),
            ("cacl", "iac"),
            ("iac", "iac"),
        ]
        assert crossplay_cells(["a", "b", "c"]) == [
            (0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)
        ]
