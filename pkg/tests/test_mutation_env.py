"""
Test cases for the mutation actions and the episode environment

Test cases can be run with:
    nosetests
    coverage report -m
"""
import os
import json
import tempfile
from dataclasses import replace
from unittest import TestCase
import numpy as np
import pandas as pd
from evasionlab.common.seeds import rng_for
from evasionlab.detector import BENIGN, MALICIOUS
from evasionlab.featurizer import FEATURE_DIM, FeatureVector, Space, dictionary_from_images, extract_features
from evasionlab.mutation_env import (
    ACTIONS,
    EVADED,
    NO_OP_STALL,
    STEP_LIMIT,
    ActionKind,
    BenignPool,
    EpisodeFinished,
    MutationEnv,
    MutationTrace,
    ParseFailure,
    SampleAlreadyEvasive,
    apply_action,
    constant_policy,
    preservation_violations,
    random_policy,
    reset,
    run_episode,
    step,
    wanted_buckets,
    write_mutants,
)
from evasionlab.pe_core import parse_pe, write_pe
from evasionlab.synthetic import SIGNATURE_SECTIONS, draw_profile, profile_to_pe
from tests.factories import (
    CREATE_WINDOW_BUCKET,
    RSRC_BUCKET,
    benign_pe,
    malicious_pe,
    toy_environment,
)

SEED = 5


######################################################################
#  A C T I O N S
######################################################################
class TestActions(TestCase):
    """Single steps of each action"""

    def setUp(self):
        self.config = toy_environment()
        self.sample = malicious_pe()
        self.original = parse_pe(self.sample)
        self.state, self.observation = reset(self.config, self.sample, "m0001", SEED)

    def test_action_order(self):
        """It should keep the four actions in policy output order"""
        self.assertEqual([a.value for a in ACTIONS],
                         ["section_rename", "section_add", "add_imports", "append_benign_binary_overlay"])
        self.assertEqual(ActionKind.ADD_IMPORTS.index, 2)

    def test_reset(self):
        """It should score the sample and cache the adversarial vector"""
        self.assertAlmostEqual(self.state.original_score, 1 / (1 + np.exp(-3.0)))
        self.assertEqual(self.observation, extract_features(self.original))
        wanted = self.state.adversarial_vector.active()
        self.assertIn(RSRC_BUCKET, wanted)
        self.assertIn(CREATE_WINDOW_BUCKET, wanted)
        self.assertTrue(set(self.observation.active()) <= set(wanted))
        self.assertEqual(wanted_buckets(self.original, self.state.adversarial_vector, Space.SECTION), [RSRC_BUCKET])

    def test_reset_refusals(self):
        """It should refuse evasive samples and files that do not parse"""
        self.assertRaises(SampleAlreadyEvasive, reset, self.config, benign_pe(), "b0001", SEED)
        self.assertRaises(ParseFailure, reset, self.config, b"not a PE file", "x0001", SEED)

    def test_section_add(self):
        """It should add a benign named section and evade"""
        state, observation, reward, done = step(self.state, ActionKind.SECTION_ADD, self.config)
        self.assertTrue(done)
        self.assertEqual(state.terminal, EVADED)
        self.assertIn(RSRC_BUCKET, observation.active())
        self.assertAlmostEqual(reward, state.original_score - state.current_score)
        self.assertGreater(reward, 0.8)
        self.assertEqual(state.current_image.sections[-1].name, ".rsrc")
        self.assertEqual(preservation_violations(self.original, state.current_image.raw_bytes), [])

    def test_section_rename(self):
        """It should rename the first section unknown to benign files"""
        state, _, _, done = step(self.state, ActionKind.SECTION_RENAME, self.config)
        self.assertTrue(done)
        detail = state.steps[0].detail
        self.assertEqual(detail, {"index": 1, "from": ".crypt", "to": ".rsrc"})
        self.assertEqual(len(state.current_image.sections), len(self.original.sections))
        self.assertEqual(preservation_violations(self.original, state.current_image.raw_bytes), [])

    def test_add_imports(self):
        """It should add whitelisted imports the GAN asks for"""
        state, observation, reward, done = step(self.state, ActionKind.ADD_IMPORTS, self.config)
        self.assertFalse(done)
        self.assertEqual(state.steps[0].detail, {"imports": ["user32.dll!CreateWindowExW"]})
        self.assertIn(CREATE_WINDOW_BUCKET, observation.active())
        self.assertAlmostEqual(reward, 0.0)
        dlls = [d.dll_name.lower() for d in state.current_image.imports]
        self.assertIn("user32.dll", dlls)
        self.assertEqual(preservation_violations(self.original, state.current_image.raw_bytes), [])

    def test_whitelist(self):
        """It should not add imports from DLLs outside the whitelist"""
        config = replace(self.config, whitelist=("advapi32",))
        state, _, _, _ = step(self.state, ActionKind.ADD_IMPORTS, config)
        self.assertFalse(state.steps[0].applied)
        self.assertIn("no_op", state.steps[0].detail)

    def test_overlay_is_score_neutral(self):
        """It should append a benign file without changing the features"""
        state, observation, reward, done = step(self.state, ActionKind.APPEND_BENIGN_BINARY_OVERLAY, self.config)
        self.assertFalse(done)
        self.assertEqual(reward, 0.0)
        self.assertEqual(observation, self.observation)
        self.assertTrue(state.current_image.raw_bytes.endswith(benign_pe()))
        self.assertEqual(preservation_violations(self.original, state.current_image.raw_bytes), [])

    def test_preservation_failures(self):
        """It should report mutants that break the loader contract"""
        self.assertEqual(preservation_violations(self.original, b"junk"), ["PARSE_FAILED"])
        moved = malicious_pe(entry_point=0x1010)
        self.assertIn("ENTRYPOINT_CHANGED", preservation_violations(self.original, moved))


######################################################################
#  E P I S O D E S
######################################################################
class TestEpisodes(TestCase):
    """Terminal conditions and whole episodes"""

    def setUp(self):
        self.config = toy_environment()
        self.sample = malicious_pe()

    def test_no_op_stall(self):
        """It should stop after consecutive no-op steps"""
        trace, _ = run_episode(self.config, self.sample, "m0001", constant_policy(ActionKind.ADD_IMPORTS), SEED)
        self.assertEqual(trace.terminal, NO_OP_STALL)
        self.assertEqual([s.applied for s in trace.steps], [True, False, False, False])
        self.assertFalse(trace.evaded)

    def test_step_limit(self):
        """It should stop at the step limit"""
        config = replace(self.config, max_steps=2)
        policy = constant_policy(ActionKind.APPEND_BENIGN_BINARY_OVERLAY)
        trace, data = run_episode(config, self.sample, "m0001", policy, SEED)
        self.assertEqual(trace.terminal, STEP_LIMIT)
        self.assertEqual(len(trace.steps), 2)
        self.assertEqual(len(data), len(self.sample) + 2 * len(benign_pe()))
        self.assertEqual(trace.final_score, trace.original_score)

    def test_evaded_wins_over_step_limit(self):
        """It should report evasion when the last allowed step evades"""
        config = replace(self.config, max_steps=1)
        trace, _ = run_episode(config, self.sample, "m0001", constant_policy(ActionKind.SECTION_ADD), SEED)
        self.assertEqual(trace.terminal, EVADED)
        self.assertTrue(trace.evaded)
        self.assertAlmostEqual(trace.final_reward, trace.original_score - trace.final_score)

    def test_finished_episode(self):
        """It should refuse steps after the episode ends"""
        state, _ = reset(self.config, self.sample, "m0001", SEED)
        state, _, _, done = step(state, ActionKind.SECTION_ADD, self.config)
        self.assertTrue(done)
        self.assertRaises(EpisodeFinished, step, state, ActionKind.SECTION_ADD, self.config)

    def test_deterministic(self):
        """It should replay the same episode from the same seed"""
        first, first_bytes = run_episode(self.config, self.sample, "m0001", random_policy(SEED), SEED)
        second, second_bytes = run_episode(self.config, self.sample, "m0001", random_policy(SEED), SEED)
        self.assertEqual(first.to_json(), second.to_json())
        self.assertEqual(first_bytes, second_bytes)

    def test_trace_json(self):
        """It should rebuild a trace from its JSON line"""
        trace, _ = run_episode(self.config, self.sample, "m0001", constant_policy(ActionKind.ADD_IMPORTS), SEED)
        self.assertEqual(MutationTrace.deserialize(json.loads(trace.to_json())), trace)

    def test_empty_pool(self):
        """It should treat an action without pool content as a no-op"""
        config = replace(self.config, pool=BenignPool((), ()))
        state, _ = reset(config, self.sample, "m0001", SEED)
        state, _, _, done = step(state, ActionKind.APPEND_BENIGN_BINARY_OVERLAY, config)
        self.assertFalse(done)
        self.assertFalse(state.steps[0].applied)
        self.assertEqual(state.stall, 1)

    def test_write_mutants(self):
        """It should write the mutant files and a manifest"""
        results = [run_episode(self.config, self.sample, "m0001", constant_policy(ActionKind.SECTION_ADD), SEED)]
        with tempfile.TemporaryDirectory() as folder:
            manifest = write_mutants(folder, results)
            frame = pd.read_csv(manifest)
            self.assertTrue(os.path.exists(os.path.join(folder, "m0001.mutant")))
        self.assertEqual(list(frame.columns), ["sample_id", "steps", "final_score", "evaded"])
        self.assertEqual(frame["sample_id"].tolist(), ["m0001"])
        self.assertTrue(bool(frame["evaded"][0]))


######################################################################
#  G Y M   W R A P P E R
######################################################################
class TestMutationEnv(TestCase):
    """reset/step over a list of samples"""

    def test_reset_and_step(self):
        """It should return observations, rewards and the terminal"""
        env = MutationEnv(toy_environment(), [("m0001", malicious_pe())], seed=SEED)
        self.assertRaises(EpisodeFinished, env.step, 0)
        observation = env.reset()
        self.assertEqual(observation.shape, (FEATURE_DIM,))
        _, reward, done, info = env.step(ActionKind.SECTION_ADD.index)
        self.assertTrue(done)
        self.assertGreater(reward, 0.0)
        self.assertEqual(info["terminal"], EVADED)
        self.assertEqual(env.action_count, 4)


######################################################################
#  P R E S E R V A T I O N   O V E R   A   C O R P U S
######################################################################
class TestActionPreservation(TestCase):
    """Every action keeps the loader contract across many malicious files"""

    @classmethod
    def setUpClass(cls):
        benign = []
        for index in range(20):
            rng = rng_for(SEED, "preservation", "benign", index)
            profile = draw_profile(rng, BENIGN)
            sections = tuple(name for name in profile.sections if name not in SIGNATURE_SECTIONS)
            benign.append(profile_to_pe(replace(profile, sections=sections), rng))
        cls.dictionary = dictionary_from_images([parse_pe(data) for data in benign])
        cls.pool = BenignPool.from_bytes(benign)
        bits = np.zeros(FEATURE_DIM)
        bits[list(cls.dictionary.sections) + list(cls.dictionary.imports)] = 1
        cls.adversarial = FeatureVector.from_binary(bits)
        cls.samples = []
        for index in range(20):
            rng = rng_for(SEED, "preservation", "malicious", index)
            profile = draw_profile(rng, MALICIOUS)
            # one section name no benign file uses, so there is always a rename target
            sections = profile.sections[:1] + (f".upx{index % 3}",) + profile.sections[1:]
            cls.samples.append(profile_to_pe(replace(profile, sections=sections), rng))
        cls.samples += [
            malicious_pe(pe32_plus=True),
            malicious_pe(overlay=b"\x90" * 300),
            malicious_pe(pe32_plus=True, overlay=b"tail"),
            malicious_pe(dll=True),
        ]

    def test_every_action_preserves(self):
        """It should leave no preservation violation for any action on any file"""
        for index, data in enumerate(self.samples):
            original = parse_pe(data)
            for action in ACTIONS:
                mutated, _ = apply_action(original, action, self.adversarial, self.dictionary, self.pool, index)
                mutant = write_pe(mutated)
                self.assertNotEqual(mutant, data)
                self.assertEqual(preservation_violations(original, mutant), [], f"{action.value} on file {index}")
