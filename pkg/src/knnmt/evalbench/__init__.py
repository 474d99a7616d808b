from .bench import (
    K_GRID,
    LAMBDA_GRID,
    REPORT_COLUMNS,
    BenchReport,
    BenchRow,
    GridResult,
    Workload,
    bench_throughput,
    grid_search,
    report_emit,
    report_load,
)
from .bleu import corpus_bleu
from .corpus import SyntheticDomainSpec, generate_domains, make_stub_model, read_tsv, write_tsv
from .pipeline import (
    ABLATION,
    DEFAULT_TAU_GRID,
    METHODS,
    TECHNIQUES,
    TauChoice,
    Workbench,
    parse_method,
    tune_tau,
    with_eos,
)
