import pathlib


_project_root_abspath = pathlib.Path(__file__).parent.resolve()
_project_name = "Graph Scribe"
_project_name_short = "graph-scribe"
_templates_directory = _project_root_abspath / "templates"
_tutorials_directory = _project_root_abspath / "tutorials"
_smoke_tutorial_directory = _tutorials_directory / "smoke"

_llm_endpoint_variable = "LLM_ENDPOINT"
_llm_api_key_variable = "LLM_API_KEY"
_encoder_endpoint_variable = "ENCODER_ENDPOINT"

_exit_success = 0
_exit_validation = 1
_exit_backend = 2
_exit_internal = 3

_task_choices = ["job", "social"]
_default_task = _task_choices[0]
_strategy_choices = ["convolutional", "plain", "raw"]
_default_strategy = _strategy_choices[0]
_variant_choices = ["full", "raw", "plain", "no_align", "mf"]
_default_variant = _variant_choices[0]
_llm_backend_choices = ["mock", "remote"]
_default_llm_backend = _llm_backend_choices[0]
_encoder_backend_choices = ["hashed_fallback", "remote"]
_default_encoder_backend = _encoder_backend_choices[0]

# Description layers consumed by each model variant. The MF baseline reads no text.
_variant_strategy = {
    "full": "convolutional",
    "raw": "raw",
    "plain": "plain",
    "no_align": "convolutional",
    "mf": None,
}

_users_artifact = "users.jsonl"
_items_artifact = "items.jsonl"
_interactions_artifact = "interactions.tsv"
_index_artifact = "index.tsv"
_split_artifact = "split.tsv"
_manifest_artifact = "manifest.json"
_token_report_artifact = "token_report.json"
_params_artifact = "params.bin"
_history_artifact = "history.jsonl"
_metrics_artifact = "metrics.json"
_subgroups_artifact = "subgroups.json"
_similarity_artifact = "layer_similarity.json"
_sweep_artifact = "layer_sweep.json"
_sft_artifact = "sft_pairs.jsonl"
_layer_artifact = "layer_{layer}.jsonl"
_partial_layer_artifact = "layer_{layer}.partial.jsonl"
_llm_cache_artifact = "llm_cache.json"
_user_text_artifact = "user_text.npy"
_item_text_artifact = "item_text.npy"

_prepare_directory = "prepared"
_layers_directory = "layers"
_text_directory = "text"
_train_directory = "train"
_evaluate_directory = "evaluate"
_sft_directory = "sft"
_sweep_directory = "sweep"
_token_report_directory = "token_report"
_propagation_record = "propagation.json"

_cd_action_prefix = "cd ${TARGET.dir.abspath} &&"
_redirect_action_postfix = "> ${TARGETS[-1].abspath} 2>&1"
