#pragma once

#include "sparse_rag/types.hpp"
#include "sparse_rag/attention_layout.hpp"
#include "sparse_rag/model.hpp"
#include "sparse_rag/checkpoint.hpp"
#include "sparse_rag/kv_store.hpp"
#include "sparse_rag/rag_pipeline.hpp"
#include "sparse_rag/synth_data.hpp"
#include "sparse_rag/metrics.hpp"
#include "sparse_rag/trainer.hpp"
#include "sparse_rag/eval_bench.hpp"
#include "sparse_rag/auto_labeler.hpp"
