import json
import shutil

import pytest
from openpyxl import load_workbook

from src.batch.campaign import CampaignOrchestrator, PlateResult, report_campaign
from src.core.screening import HitList

CAMPAIGN_CONFIG = {
    "analysis": {"method": "lambda_gl", "threshold_value": 0.5, "effect_sign": "negative"},
    "secondary": {"p_s": 0.75, "r": 3, "sigma_mode": "robust"},
    "profile_top": 5,
}


@pytest.fixture
def campaign_config(tmp_path):
    path = tmp_path / "campaign_config.json"
    path.write_text(json.dumps(CAMPAIGN_CONFIG))
    return str(path)


def run_campaign(pilot, output_dir, config_file, **kwargs):
    return CampaignOrchestrator(pilot["design"], pilot["wt_dir"], pilot["mut_dir"], str(output_dir),
                                config_file=config_file, n_jobs=1, **kwargs).run()


def test_campaign_separates_true_hits_from_pseudo_hits(tmp_path, pilot_campaign, campaign_config):
    out = tmp_path / "out"
    report = run_campaign(pilot_campaign, out, campaign_config)

    plates = {p["plate_id"]: p for p in report["plates"]}
    assert plates["pilot_02"]["status"] == "MISSING_MUT"
    pilot = plates["pilot_01"]
    assert pilot["status"] == "OK"
    assert pilot["candidates"] == [pilot_campaign["true_hit"]]
    assert pilot["pseudo_hits"] == [pilot_campaign["pseudo_hit"]]
    assert pilot["final_hits"] == [pilot_campaign["true_hit"]]
    assert pilot["secondary_counts"][0]["beyond_3sd"] == 4
    assert pilot["controls"]["WT"]["positive_control_wells"] == 32

    totals = report["totals"]
    assert totals["plates"] == 2
    assert totals["plates_analyzed"] == 1
    assert totals["plates_skipped"] == 1
    assert totals["compounds_studied"] == 30
    assert totals["hits"] == 1
    assert totals["hit_rate_percent"] == "3.3%"

    assert (out / "campaign.json").exists()
    assert (out / "execution.log").exists()
    for assay in ("WT", "MUT"):
        assert (out / "details" / f"pilot_01_{assay}_profile.csv").exists()
        assert (out / "details" / f"pilot_01_{assay}_profile.annotations.csv").exists()

    wb = load_workbook(out / "campaign_report.xlsx")
    assert wb.sheetnames == ["Campaign Totals", "Plates", "Hits"]
    hits_sheet = [[c.value for c in row] for row in wb["Hits"].iter_rows(min_row=2)]
    assert [(r[1], r[2]) for r in hits_sheet] == [(pilot_campaign["true_hit"], "HIT"),
                                                 (pilot_campaign["pseudo_hit"], "PSEUDO_HIT")]


def test_campaign_json_is_stable_between_runs(tmp_path, pilot_campaign, campaign_config):
    first = run_campaign(pilot_campaign, tmp_path / "a", campaign_config)
    second = run_campaign(pilot_campaign, tmp_path / "b", campaign_config)
    assert first["plates"] == second["plates"]
    assert (tmp_path / "a" / "campaign.json").read_bytes() == (tmp_path / "b" / "campaign.json").read_bytes()


def test_unmatched_mut_plate_is_reported(tmp_path, pilot_campaign, campaign_config):
    shutil.copy(f"{pilot_campaign['mut_dir']}/pilot_01.csv", f"{pilot_campaign['mut_dir']}/pilot_09.csv")
    report = run_campaign(pilot_campaign, tmp_path / "out", campaign_config)
    statuses = {p["plate_id"]: p["status"] for p in report["plates"]}
    assert statuses == {"pilot_01": "OK", "pilot_02": "MISSING_MUT", "pilot_09": "MISSING_WT"}


def test_broken_plate_is_an_error_row(tmp_path, pilot_campaign, campaign_config):
    with open(f"{pilot_campaign['wt_dir']}/pilot_01.csv", "a") as f:
        f.write("X999,1.0,pool,WT\n")
    report = run_campaign(pilot_campaign, tmp_path / "out", campaign_config)
    plate = report["plates"][0]
    assert plate["status"] == "ERROR"
    assert "X999" in plate["notes"]
    assert report["totals"]["plates_analyzed"] == 0


def test_cli_overrides_apply_without_config(tmp_path, pilot_campaign):
    overrides = {"analysis": {"method": "lambda_gl", "threshold_value": 0.5}, "profile_top": 0}
    report = run_campaign(pilot_campaign, tmp_path / "out", None, cli_overrides=overrides)
    pilot = report["plates"][0]
    assert pilot["secondary"] is None
    assert pilot["final_hits"] == [pilot_campaign["true_hit"]]
    assert pilot["wt"]["method"] == "lambda_gl(r=0.5)"


def _plate(compounds, hits, plate_id="p"):
    dual = HitList(compounds[:hits], {}, "m", compounds)
    return PlateResult(plate_id, "OK", compounds=len(compounds), dual=dual)


def test_report_campaign_totals():
    compounds = [f"C{j:04d}" for j in range(640)]
    results = [_plate(compounds, 7, f"p{i}") for i in range(15)] + [_plate(compounds, 8, "p15")]
    results.append(PlateResult("p16", "MISSING_MUT"))
    totals = report_campaign(results)["totals"]
    assert totals["compounds_studied"] == 10240
    assert totals["hits"] == 113
    assert totals["hit_rate_percent"] == "1.1%"
    assert totals["plates_skipped"] == 1


def test_report_campaign_without_plates():
    totals = report_campaign([])["totals"]
    assert totals["compounds_studied"] == 0
    assert totals["hit_rate"] == 0.0
    assert totals["hit_rate_percent"] == "0.0%"
