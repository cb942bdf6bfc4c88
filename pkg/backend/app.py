from flask import Flask, Response, jsonify, request
import io
import os
import sys

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from deep_wishart import harness, verify
from deep_wishart.errors import DeepWishartError, UnknownPreset
from deep_wishart.kernel import KernelConfig
from deep_wishart.model import dwp_prior_sample
from deep_wishart.numerics import RngStream

app = Flask(__name__)

# Keeps a single request from running the full-size Monte Carlo checks
MAX_API_DRAWS = 20000
MAX_PRIOR_POINTS = 200


def _int_field(data, name, default, low, high):
    value = data.get(name, default)
    if not isinstance(value, int) or isinstance(value, bool) or not (low <= value <= high):
        raise ValueError(f"'{name}' must be an integer between {low} and {high}")
    return value


@app.route('/api/presets', methods=['GET'])
def get_presets():
    """Returns the list of available experiment presets"""
    try:
        return jsonify({"ok": True, "presets": harness.list_presets()})
    except Exception as e:
        return jsonify({"ok": False, "error": str(e)}), 500


@app.route('/api/presets/<preset_id>', methods=['GET'])
def get_preset_by_id(preset_id):
    """Returns the content of a specific preset by ID"""
    try:
        return jsonify({"ok": True, "id": preset_id, **harness.load_preset(preset_id)})
    except UnknownPreset as e:
        return jsonify(e.to_dict()), 404
    except Exception as e:
        return jsonify({"ok": False, "error": str(e)}), 500


@app.route('/api/verify', methods=['POST'])
def run_verify():
    """Runs one verification suite with capped Monte Carlo draws"""
    try:
        data = request.get_json(silent=True) or {}
        suite = data.get('suite', 'numerics')
        if suite not in list(verify.SUITES) + ['all']:
            return jsonify({"ok": False, "error": f"Unknown suite '{suite}'"}), 400
        try:
            seed = _int_field(data, 'seed', 0, 0, 2 ** 31 - 1)
            draws = _int_field(data, 'draws', 2000, 1, MAX_API_DRAWS)
        except ValueError as e:
            return jsonify({"ok": False, "error": str(e)}), 400

        results = verify.run_suite(suite, seed=seed, draws=draws)
        return jsonify({
            "ok": True,
            "suite": suite,
            "passed": all(r.passed for r in results),
            "checks": [r.to_dict() for r in results]
        })

    except DeepWishartError as e:
        return jsonify(e.to_dict()), 400
    except Exception as e:
        return jsonify({"ok": False, "error": str(e)}), 500


@app.route('/api/sample-prior', methods=['POST'])
def sample_prior():
    """Draws one deep Wishart prior sample and returns every Gram matrix"""
    try:
        data = request.get_json(silent=True) or {}
        try:
            depth = _int_field(data, 'depth', 2, 1, 10)
            points = _int_field(data, 'points', 4, 1, MAX_PRIOR_POINTS)
            input_dim = _int_field(data, 'input_dim', 2, 1, 100)
            seed = _int_field(data, 'seed', 0, 0, 2 ** 31 - 1)
        except ValueError as e:
            return jsonify({"ok": False, "error": str(e)}), 400

        rng = RngStream(seed)
        x = rng.split(0).normal((points, input_dim))
        kernels = [KernelConfig() for _ in range(depth + 1)]
        sample = dwp_prior_sample(x, [input_dim] * depth, kernels, rng.split(1))

        return jsonify({
            "ok": True,
            "inputs": x.tolist(),
            "grams": [g.tolist() for g in sample.grams],
            "outputs": sample.outputs[:, 0].tolist(),
            "min_eigenvalue": float(np.linalg.eigvalsh(sample.grams[-1]).min())
        })

    except DeepWishartError as e:
        return jsonify(e.to_dict()), 400
    except Exception as e:
        return jsonify({"ok": False, "error": str(e)}), 500


@app.route('/api/runs/download-excel', methods=['POST'])
def download_runs_excel():
    """Download run records as an Excel results table"""
    try:
        data = request.get_json(silent=True)

        if not data or 'records' not in data:
            return jsonify({"ok": False, "error": "Missing 'records' in request body"}), 400

        records = data['records']
        if not isinstance(records, list) or not records:
            return jsonify({"ok": False, "error": "'records' must be a non-empty list"}), 400

        try:
            runs = [harness.RunRecord.from_dict(r) for r in records]
        except (TypeError, KeyError) as e:
            return jsonify({"ok": False, "error": f"Invalid run record: {e}"}), 400

        buffer = io.BytesIO()
        harness.write_results_workbook(runs, buffer)

        return Response(
            buffer.getvalue(),
            mimetype='application/vnd.openxmlformats-officedocument.spreadsheetml.sheet',
            headers={'Content-Disposition': 'attachment; filename=dwp_runs.xlsx'}
        )

    except Exception as e:
        return jsonify({"ok": False, "error": str(e)}), 500


if __name__ == '__main__':
    app.run(debug=True, host='127.0.0.1', port=5000)
