import filecmp
import io
import json
import os
import tempfile

from django.core import management
from django.core.management.base import CommandError
from django.test import override_settings
from django.test import SimpleTestCase

from ..constants import SUMMARY_FILE
from ..constants import TRACE_FILE
from ..iteration import expected_solves
from .common import small_config_text


@override_settings(IDSM_PROBE_COUNT=5)
class ManagementCommandTestCase(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = self.directory.name
        self.config = self.write_config("run.ini", small_config_text(iterations=2))
        self.data = os.path.join(self.root, "data")
        self.out = os.path.join(self.root, "out")

    def tearDown(self):
        self.directory.cleanup()

    def write_config(self, name, text):
        path = os.path.join(self.root, name)
        with open(path, "w") as fd:
            fd.write(text)
        return path

    def call(self, *args, **kwargs):
        out = io.StringIO()
        management.call_command(*args, stdout=out, **kwargs)
        return out.getvalue()


class TestGenerateCommand(ManagementCommandTestCase):
    def test_generate(self):
        output = self.call("generate", config=self.config, out=self.data)
        self.assertIn("Wrote 2 datasets (noise=0.15, seed=0)", output)
        for name in (
            "manifest.json",
            "mesh.txt",
            "partition.csv",
            "data_1.csv",
            "data_2.csv",
            "truth_conductivity.csv",
        ):
            self.assertTrue(os.path.isfile(os.path.join(self.data, name)), name)

    def test_reproducible(self):
        second = os.path.join(self.root, "second")
        self.call("generate", config=self.config, out=self.data)
        self.call("generate", config=self.config, out=second)
        names = sorted(os.listdir(self.data))
        self.assertEqual(names, sorted(os.listdir(second)))
        _match, mismatch, errors = filecmp.cmpfiles(
            self.data, second, names, shallow=False
        )
        self.assertEqual((mismatch, errors), ([], []))

    def test_seed_override(self):
        other = os.path.join(self.root, "other")
        self.call("generate", config=self.config, out=self.data)
        output = self.call("generate", config=self.config, out=other, seed=3)
        self.assertIn("seed=3", output)
        self.assertFalse(
            filecmp.cmp(
                os.path.join(self.data, "data_1.csv"),
                os.path.join(other, "data_1.csv"),
                shallow=False,
            )
        )

    def test_invalid_config(self):
        config = self.write_config(
            "bad.ini", small_config_text().replace("noise = 0.15", "noise = -1")
        )
        with self.assertRaises(CommandError) as context:
            self.call("generate", config=config, out=self.data)
        self.assertEqual(context.exception.returncode, 2)
        self.assertIn("bad.ini", str(context.exception))

    def test_unknown_preset(self):
        with self.assertRaises(CommandError) as context:
            self.call("generate", config="example99", out=self.data)
        self.assertEqual(context.exception.returncode, 2)


class TestReconstructCommand(ManagementCommandTestCase):
    def setUp(self):
        super().setUp()
        self.call("generate", config=self.config, out=self.data)

    def test_reconstruct_and_verify(self):
        output = self.call(
            "reconstruct", config=self.config, data=self.data, out=self.out
        )
        self.assertIn("Lambda trace:", output)
        self.assertIn("Finished 2 iterations with 9 PDE solves", output)

        for k in range(3):
            self.assertTrue(
                os.path.isfile(os.path.join(self.out, f"u_conductivity_{k}.csv"))
            )
        self.assertTrue(os.path.isfile(os.path.join(self.out, TRACE_FILE)))

        with open(os.path.join(self.out, SUMMARY_FILE)) as fd:
            summary = json.load(fd)
        self.assertEqual(summary["iterations"], 2)
        self.assertEqual(summary["solve_count"], expected_solves(2, True))
        self.assertEqual(summary["scheme"], "bfg")
        self.assertEqual(len(summary["probe_log"]), 1)

        output = self.call("verify", out=self.out)
        self.assertIn("All invariants hold", output)
        self.assertIn("box constraint", output)

    def test_overrides(self):
        self.call(
            "reconstruct",
            config=self.config,
            data=self.data,
            out=self.out,
            scheme="dfp",
            max_iterations=1,
            vtk=True,
            seed=4,
        )
        with open(os.path.join(self.out, SUMMARY_FILE)) as fd:
            summary = json.load(fd)
        self.assertEqual(summary["scheme"], "dfp")
        self.assertEqual(summary["iterations"], 1)
        self.assertEqual(summary["solve_count"], 4)
        self.assertTrue(os.path.isfile(os.path.join(self.out, "u_1.vtk")))
        self.assertIn("All invariants hold", self.call("verify", out=self.out))

    def test_data_mismatch(self):
        config = self.write_config(
            "other.ini",
            small_config_text().replace("arcs = -pi/2, pi/2", "arcs = 0, pi"),
        )
        with self.assertRaises(CommandError) as context:
            self.call("reconstruct", config=config, data=self.data, out=self.out)
        self.assertEqual(context.exception.returncode, 3)

    def test_missing_data(self):
        with self.assertRaises(CommandError) as context:
            self.call(
                "reconstruct",
                config=self.config,
                data=os.path.join(self.root, "nowhere"),
                out=self.out,
            )
        self.assertEqual(context.exception.returncode, 3)


class TestVerifyCommand(ManagementCommandTestCase):
    def setUp(self):
        super().setUp()
        self.call("generate", config=self.config, out=self.data)
        self.call("reconstruct", config=self.config, data=self.data, out=self.out)

    def assertFails(self, invariant):
        with self.assertRaises(CommandError) as context:
            self.call("verify", out=self.out)
        self.assertEqual(context.exception.returncode, 1)
        self.assertIn(f"Failed invariant {invariant}", str(context.exception))

    def edit_summary(self, **changes):
        path = os.path.join(self.out, SUMMARY_FILE)
        with open(path) as fd:
            summary = json.load(fd)
        summary.update(changes)
        with open(path, "w") as fd:
            json.dump(summary, fd)
        return summary

    def test_box_violation(self):
        path = os.path.join(self.out, "u_conductivity_1.csv")
        with open(path) as fd:
            lines = fd.read().splitlines()
        lines[1] = "0,2.0"
        with open(path, "w") as fd:
            fd.write("\n".join(lines) + "\n")
        self.assertFails("box constraint")

    def test_solve_count(self):
        with open(os.path.join(self.out, SUMMARY_FILE)) as fd:
            count = json.load(fd)["solve_count"]
        self.edit_summary(solve_count=count + 1)
        self.assertFails("solve-count audit")

    def test_negative_lambda(self):
        self.edit_summary(**{"lambda": [-0.5, None], "skipped": []})
        self.assertFails("lambda nonnegativity")

    def test_probe_bound(self):
        self.edit_summary(
            probe_log=[{"k": 0, "left": 2.0, "right": 1.0, "ratio": 2.0}]
        )
        self.assertFails("probe bound")

    def test_missing_bundle(self):
        with self.assertRaises(CommandError) as context:
            self.call("verify", out=os.path.join(self.root, "nowhere"))
        self.assertEqual(context.exception.returncode, 1)
