"""Explicit memory for a small decoder-only transformer.

References are encoded once into sparse attention key-value tensors,
stored in a compressed bank, retrieved per decoding chunk by embedding
similarity, and attended to alongside the ordinary context.  The package
covers the model, the memory writer, two-level residual quantization, the
bank and its file formats, retrieval with leakage filtering, a cost model
for comparing knowledge formats, a chunked inference engine, a TCP bank
service, and a command-line interface.
"""

from .bank import (
    MemoryBank,
    MemoryCache,
    QuantizedMemory,
    StorageReport,
    dequantize_memory,
    human_bytes,
    load_codebooks,
    quantize_memory,
    save_codebooks,
    storage_report,
)
from .config import ModelConfig
from .costmodel import (
    CostParams,
    CostReport,
    advantage_interval,
    cost_read_explicit,
    cost_read_external,
    cost_read_implicit,
    cost_report,
    cost_write_explicit,
    cost_write_external,
    cost_write_implicit,
    emit_curves,
    log_range,
    optimal_format,
    total_cost,
)
from .engine import (
    Engine,
    EngineConfig,
    TrainLayout,
    build_train_layout,
    expected_retrievals,
    merge_engine_config,
    parse_engine_config,
)
from .errors import (
    CompatibilityError,
    ConfigError,
    ExmemError,
    FormatError,
    InputError,
    NotFoundError,
    NumericError,
    ProtocolError,
    ShapeError,
    StateError,
    TrainingError,
    TransportError,
    UsageError,
)
from .model import (
    KVCache,
    Model,
    ReferenceEncoding,
    encode_reference_flops,
    encode_reference_kv,
    encode_references,
    forward_chunk,
    init_model,
    load_model,
    n_params_non_embedding,
    rope_rotate,
    save_model,
    start_session,
)
from .quantizer import (
    Codebook,
    QuantizerSpec,
    quantizer_decode,
    quantizer_encode,
    quantizer_train,
)
from .retrieval import (
    NgramEmbedder,
    RemoteEmbedder,
    RetrievalIndex,
    SearchResult,
    filter_leakage,
    overlap,
)
from .service import BankClient, BankServer, client_query, serve_bank
from .writer import (
    ExplicitMemory,
    TokenWeights,
    select_topk,
    sparsify,
    token_weights_approx,
    token_weights_exact,
    write_memory,
)

__version__ = "0.1.0"
