"""Published reference numbers that reproduction runs are compared against."""

# name -> (nodes, undirected edges as distributed, features, classes, homophily beta)
DATASET_STATS = {
    "cora": (2708, 5429, 1433, 7, 0.83),
    "citeseer": (3327, 4732, 3703, 6, 0.71),
    "pubmed": (19717, 44338, 500, 3, 0.79),
    "chameleon": (2277, 36101, 2325, 5, 0.25),
    "squirrel": (5201, 217073, 2089, 5, 0.22),
    "actor": (7600, 33544, 931, 5, 0.24),
}

HOMOPHILIC = ("cora", "citeseer", "pubmed")
NONHOMOPHILIC = ("chameleon", "squirrel", "actor")

# (model kind, regime, dataset) -> (mean %, std %)
ACCURACY = {
    ("gcn", "joint", "chameleon"): (65.22, 2.22),
    ("gcn", "joint", "squirrel"): (45.44, 1.27),
    ("gcn", "joint", "actor"): (28.30, 0.73),
    ("gat", "joint", "chameleon"): (63.88, 2.42),
    ("gat", "joint", "squirrel"): (41.19, 3.38),
    ("gat", "joint", "actor"): (28.49, 1.06),
    ("gat-pos", "joint", "chameleon"): (67.76, 2.54),
    ("gat-pos", "joint", "squirrel"): (52.90, 1.55),
    ("gat-pos", "joint", "actor"): (34.89, 1.38),
    ("gat-pos", "frozen", "chameleon"): (65.75, 1.81),
    ("gat-pos", "frozen", "squirrel"): (50.63, 1.29),
    ("gat-pos", "frozen", "actor"): (34.95, 0.95),
    ("gat-pos-transformer", "joint", "chameleon"): (65.55, 2.38),
    ("gat-pos-transformer", "joint", "squirrel"): (51.62, 1.84),
    ("gat-pos-transformer", "joint", "actor"): (34.97, 1.27),
    ("gat-pos-transformer", "frozen", "chameleon"): (65.42, 2.13),
    ("gat-pos-transformer", "frozen", "squirrel"): (50.79, 1.35),
    ("gat-pos-transformer", "frozen", "actor"): (34.66, 1.17),
    ("gcn", "joint", "cora"): (85.67, 0.94),
    ("gcn", "joint", "citeseer"): (73.28, 1.37),
    ("gcn", "joint", "pubmed"): (88.14, 0.32),
    ("gat", "joint", "cora"): (87.06, 0.98),
    ("gat", "joint", "citeseer"): (74.79, 1.89),
    ("gat", "joint", "pubmed"): (87.51, 0.43),
    ("gat-pos", "joint", "cora"): (86.61, 1.13),
    ("gat-pos", "joint", "citeseer"): (73.81, 1.27),
    ("gat-pos", "joint", "pubmed"): (87.56, 0.48),
}

# table name -> (datasets, [(row label, model kind, regime)])
TABLES = {
    "nonhomophilic": (NONHOMOPHILIC, [
        ("GCN", "gcn", "joint"),
        ("GAT", "gat", "joint"),
        ("GAT-POS", "gat-pos", "joint"),
        ("GAT-POS-Transformer", "gat-pos-transformer", "joint"),
    ]),
    "homophilic": (HOMOPHILIC, [
        ("GCN", "gcn", "joint"),
        ("GAT", "gat", "joint"),
        ("GAT-POS", "gat-pos", "joint"),
    ]),
    "ablation": (NONHOMOPHILIC, [
        ("GAT-POS joint", "gat-pos", "joint"),
        ("GAT-POS frozen", "gat-pos", "frozen"),
        ("GAT-POS-Transformer joint", "gat-pos-transformer", "joint"),
        ("GAT-POS-Transformer frozen", "gat-pos-transformer", "frozen"),
    ]),
}
