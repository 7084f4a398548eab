//! Hybrid strategy search over fixed-horizon action sequences.
//!
//! A genetic algorithm explores globally: tournament selection, one-point
//! crossover, per-gene mutation, with elitism and a distinct-by-genome hall
//! of fame. The best candidates are then refined locally by Monte Carlo tree
//! search using UCB1 selection, single-child expansion, simulations that
//! follow the candidate's own genes beyond the tree frontier, and
//! backpropagation of the full-episode discounted return. The final strategy
//! is the argmax over refined estimates.
//!
//! Refinement is anchored: simulations replay the input chromosome's genes
//! by absolute time step, so the tree explores deviations from the candidate
//! rather than planning from scratch, and the refined sequence is evaluated
//! against the input under identical noise; if it scores worse, the input is
//! returned unchanged.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::discounted_returns;
use crate::env::{Cohort, PatientState};
use crate::error::{Error, Result};
use crate::seeding;

/// A candidate strategy: one action per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub actions: Vec<usize>,
    pub cached_fitness: Option<f64>,
}

impl Chromosome {
    pub fn new(actions: Vec<usize>) -> Chromosome {
        Chromosome { actions, cached_fitness: None }
    }

    pub fn random(horizon: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Chromosome {
        Chromosome::new((0..horizon).map(|_| rng.gen_range(0..n_actions)).collect())
    }

    pub fn validate_for(&self, horizon: usize, n_actions: usize) -> Result<()> {
        if self.actions.len() != horizon {
            return Err(Error::Usage(format!(
                "chromosome has {} genes, horizon is {horizon}",
                self.actions.len()
            )));
        }
        if let Some(&bad) = self.actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::Usage(format!(
                "chromosome gene {bad} out of range for {n_actions} actions"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elite: usize,
    pub fitness_rollouts: usize,
    /// Hall-of-fame size: how many distinct candidates survive the search.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 64,
            generations: 40,
            tournament: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.05,
            elite: 2,
            fitness_rollouts: 4,
            candidates: 5,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::Config("population must be at least 1".into()));
        }
        if self.elite == 0 || self.elite > self.population {
            return Err(Error::Config(format!(
                "elite must lie in 1..={}, got {}",
                self.population, self.elite
            )));
        }
        if self.tournament == 0 || self.tournament > self.population {
            return Err(Error::Config(format!(
                "tournament size must lie in 1..={}, got {}",
                self.population, self.tournament
            )));
        }
        for (name, v) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.fitness_rollouts == 0 {
            return Err(Error::Config("fitness_rollouts must be at least 1".into()));
        }
        if self.candidates == 0 || self.candidates > self.population {
            return Err(Error::Config(format!(
                "candidates must lie in 1..={}, got {}",
                self.population, self.candidates
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsConfig {
    /// Number of selection-expansion-simulation-backpropagation passes.
    pub budget: u64,
    /// UCB1 exploration constant.
    pub exploration: f64,
    /// Cap on simulation length past the tree frontier; `None` runs to the
    /// horizon.
    pub rollout_depth: Option<usize>,
    pub seed: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig { budget: 200, exploration: 2.0_f64.sqrt(), rollout_depth: None, seed: 0 }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if !(self.exploration > 0.0 && self.exploration.is_finite()) {
            return Err(Error::Config(format!(
                "exploration must be positive, got {}",
                self.exploration
            )));
        }
        if self.rollout_depth == Some(0) {
            return Err(Error::Config("rollout_depth must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// Mean discounted return of executing the chromosome open-loop from reset,
/// averaged over `rollouts` noise draws. The result is cached on the
/// chromosome.
pub fn fitness(
    chromosome: &mut Chromosome,
    cohort: &Cohort,
    patient_id: usize,
    discount: f64,
    rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    chromosome.validate_for(cohort.config.horizon, cohort.config.n_actions)?;
    if rollouts == 0 {
        return Err(Error::Usage("fitness needs at least one rollout".into()));
    }
    let mut total = 0.0;
    for _ in 0..rollouts {
        let episode = rng.next_u64();
        let mut state = cohort.reset(patient_id, episode)?;
        let mut rewards = Vec::with_capacity(chromosome.actions.len());
        for &action in &chromosome.actions {
            let record = cohort.step(patient_id, &state, action, rng)?;
            rewards.push(record.reward);
            state = record.next_state;
        }
        total += discounted_returns(&rewards, discount)?[0];
    }
    let value = total / rollouts as f64;
    chromosome.cached_fitness = Some(value);
    Ok(value)
}

fn ensure_cached(
    population: &mut [Chromosome],
    eval: &mut dyn FnMut(&Chromosome) -> Result<f64>,
) -> Result<()> {
    for c in population.iter_mut() {
        if c.cached_fitness.is_none() {
            c.cached_fitness = Some(eval(c)?);
        }
    }
    Ok(())
}

fn cached(c: &Chromosome) -> f64 {
    c.cached_fitness.expect("fitness evaluated before ranking")
}

/// Indices of `population` from best to worst fitness, ties kept in input
/// order.
fn ranking(population: &[Chromosome]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        cached(&population[b]).partial_cmp(&cached(&population[a])).unwrap().then(a.cmp(&b))
    });
    order
}

fn tournament_winner(population: &[Chromosome], size: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut best = rng.gen_range(0..population.len());
    for _ in 1..size {
        let contender = rng.gen_range(0..population.len());
        if cached(&population[contender]) > cached(&population[best]) {
            best = contender;
        }
    }
    best
}

/// One generation: evaluates what is not yet cached, copies the elite, then
/// fills the rest with tournament -> one-point crossover -> per-gene
/// mutation offspring.
pub fn evolve(
    population: &mut Vec<Chromosome>,
    config: &GaConfig,
    n_actions: usize,
    eval: &mut dyn FnMut(&Chromosome) -> Result<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Chromosome>> {
    config.validate()?;
    if population.len() != config.population {
        return Err(Error::Usage(format!(
            "population has {} members, config says {}",
            population.len(),
            config.population
        )));
    }
    ensure_cached(population, eval)?;
    let order = ranking(population);
    let mut next: Vec<Chromosome> =
        order.iter().take(config.elite).map(|&i| population[i].clone()).collect();

    let horizon = population[0].actions.len();
    while next.len() < config.population {
        let a = tournament_winner(population, config.tournament, rng);
        let b = tournament_winner(population, config.tournament, rng);
        let mut child = population[a].clone();
        if horizon >= 2 && rng.gen::<f64>() < config.crossover_rate {
            let cut = rng.gen_range(1..horizon);
            child.actions[cut..].copy_from_slice(&population[b].actions[cut..]);
            child.cached_fitness = None;
        }
        let mut mutated = false;
        for gene in child.actions.iter_mut() {
            if rng.gen::<f64>() < config.mutation_rate {
                *gene = rng.gen_range(0..n_actions);
                mutated = true;
            }
        }
        if mutated {
            child.cached_fitness = None;
        }
        next.push(child);
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    /// Best fitness in the hall of fame after this generation merged in.
    pub hall_best: f64,
}

#[derive(Clone, Debug)]
pub struct GaOutcome {
    /// Up to `candidates` distinct-by-genome best individuals ever seen,
    /// best first.
    pub hall: Vec<Chromosome>,
    pub per_generation: Vec<GenerationStats>,
}

fn merge_hall(hall: &mut Vec<Chromosome>, population: &[Chromosome], keep: usize) {
    for c in population {
        if let Some(existing) = hall.iter_mut().find(|h| h.actions == c.actions) {
            if cached(c) > cached(existing) {
                existing.cached_fitness = c.cached_fitness;
            }
        } else {
            hall.push(c.clone());
        }
    }
    hall.sort_by(|a, b| cached(b).partial_cmp(&cached(a)).unwrap());
    hall.truncate(keep);
}

/// Full genetic search: `generations` evolve steps from a uniform-random
/// population, tracking the hall of fame across every generation.
pub fn ga_search(
    config: &GaConfig,
    horizon: usize,
    n_actions: usize,
    eval: &mut dyn FnMut(&Chromosome) -> Result<f64>,
) -> Result<GaOutcome> {
    config.validate()?;
    if horizon == 0 || n_actions == 0 {
        return Err(Error::Usage(format!(
            "search needs horizon >= 1 and n_actions >= 1, got {horizon} and {n_actions}"
        )));
    }
    let mut rng = seeding::stream(config.seed, "ga");
    let mut population: Vec<Chromosome> = (0..config.population)
        .map(|_| Chromosome::random(horizon, n_actions, &mut rng))
        .collect();

    let mut hall: Vec<Chromosome> = Vec::new();
    let mut per_generation = Vec::with_capacity(config.generations + 1);
    for generation in 0..=config.generations {
        ensure_cached(&mut population, eval)?;
        merge_hall(&mut hall, &population, config.candidates);
        let best = cached(&population[ranking(&population)[0]]);
        let mean =
            population.iter().map(cached).sum::<f64>() / population.len() as f64;
        per_generation.push(GenerationStats {
            generation,
            best,
            mean,
            hall_best: cached(&hall[0]),
        });
        if generation == config.generations {
            break;
        }
        population = evolve(&mut population, config, n_actions, eval, &mut rng)?;
    }
    Ok(GaOutcome { hall, per_generation })
}

/// One tree node. `visits` equals the sum of child visits plus
/// `own_simulations`, the number of playouts launched from this node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchNode {
    pub state: PatientState,
    pub depth: usize,
    pub visits: u64,
    pub value_sum: f64,
    pub reward_from_parent: f64,
    pub own_simulations: u64,
    /// Arena index per action; `None` until that action is expanded.
    pub children: Vec<Option<usize>>,
}

impl SearchNode {
    pub fn mean_value(&self) -> f64 {
        if self.visits == 0 { 0.0 } else { self.value_sum / self.visits as f64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub actions: Vec<usize>,
    pub estimate: f64,
    pub root_visits: u64,
    pub node_count: usize,
    pub root_child_visits: Vec<u64>,
    pub conservation_ok: bool,
    /// True when the refined sequence evaluated worse than the input and the
    /// input was kept.
    pub kept_input: bool,
}

fn first_untried(node: &SearchNode) -> Option<usize> {
    node.children.iter().position(|c| c.is_none())
}

fn ucb_child(arena: &[SearchNode], node: &SearchNode, exploration: f64) -> usize {
    let parent_visits = node.visits.max(1) as f64;
    let mut best_action = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (action, child) in node.children.iter().enumerate() {
        let idx = child.expect("ucb runs only on fully expanded nodes");
        let c = &arena[idx];
        let score =
            c.mean_value() + exploration * (parent_visits.ln() / c.visits as f64).sqrt();
        if score > best_score {
            best_score = score;
            best_action = action;
        }
    }
    best_action
}

fn action_at(
    genes: &[usize],
    t: usize,
    state: &PatientState,
    policy: &mut dyn FnMut(&PatientState) -> usize,
) -> usize {
    if t < genes.len() { genes[t] } else { policy(state) }
}

/// Local refinement of one candidate. Builds a determinized tree from the
/// patient's reset state; simulations past the frontier replay the
/// chromosome's genes at their absolute time steps, falling back to the
/// policy closure if the genes run out. The greedy max-mean walk from the
/// root, completed with the remaining genes, is evaluated under the same
/// noise as the input chromosome and only returned if it is no worse.
pub fn mcts_refine(
    chromosome: &Chromosome,
    cohort: &Cohort,
    patient_id: usize,
    config: &MctsConfig,
    policy: &mut dyn FnMut(&PatientState) -> usize,
) -> Result<RefineResult> {
    config.validate()?;
    chromosome.validate_for(cohort.config.horizon, cohort.config.n_actions)?;
    let horizon = cohort.config.horizon;
    let n_actions = cohort.config.n_actions;
    let discount = cohort.config.discount;
    let genes = &chromosome.actions;

    let mut tree_rng = seeding::stream(config.seed, "mcts-tree");
    let root_state = cohort.reset(patient_id, tree_rng.next_u64())?;
    let mut arena = vec![SearchNode {
        state: root_state,
        depth: 0,
        visits: 0,
        value_sum: 0.0,
        reward_from_parent: 0.0,
        own_simulations: 0,
        children: vec![None; n_actions],
    }];

    for _ in 0..config.budget {
        // Selection and expansion.
        let mut path = vec![0usize];
        loop {
            let idx = *path.last().unwrap();
            if arena[idx].depth == horizon {
                break;
            }
            if let Some(action) = first_untried(&arena[idx]) {
                let record = cohort.step(patient_id, &arena[idx].state, action, &mut tree_rng)?;
                let child = SearchNode {
                    state: record.next_state,
                    depth: arena[idx].depth + 1,
                    visits: 0,
                    value_sum: 0.0,
                    reward_from_parent: record.reward,
                    own_simulations: 0,
                    children: if arena[idx].depth + 1 == horizon {
                        Vec::new()
                    } else {
                        vec![None; n_actions]
                    },
                };
                let child_idx = arena.len();
                arena.push(child);
                arena[idx].children[action] = Some(child_idx);
                path.push(child_idx);
                break;
            }
            let action = ucb_child(&arena, &arena[idx], config.exploration);
            path.push(arena[idx].children[action].unwrap());
        }

        // Simulation: rewards inside the tree count from the root's clock,
        // the playout continues at the frontier node's absolute time.
        let frontier = *path.last().unwrap();
        let mut ret = 0.0;
        for (edge, &idx) in path.iter().enumerate().skip(1) {
            ret += discount.powi(edge as i32 - 1) * arena[idx].reward_from_parent;
        }
        let mut state = arena[frontier].state.clone();
        let depth = arena[frontier].depth;
        let steps = (horizon - depth).min(config.rollout_depth.unwrap_or(horizon));
        for t in depth..depth + steps {
            let action = action_at(genes, t, &state, policy);
            let record = cohort.step(patient_id, &state, action, &mut tree_rng)?;
            ret += discount.powi(t as i32) * record.reward;
            state = record.next_state;
        }

        // Backpropagation.
        for &idx in &path {
            arena[idx].visits += 1;
            arena[idx].value_sum += ret;
        }
        arena[frontier].own_simulations += 1;
    }

    // Greedy max-mean walk, completed with the chromosome's genes.
    let mut actions = Vec::with_capacity(horizon);
    let mut idx = 0usize;
    while arena[idx].children.iter().any(|c| c.is_some()) {
        let mut best_action = None;
        let mut best_mean = f64::NEG_INFINITY;
        for (action, child) in arena[idx].children.iter().enumerate() {
            if let Some(c) = *child {
                let mean = arena[c].mean_value();
                if mean > best_mean {
                    best_mean = mean;
                    best_action = Some((action, c));
                }
            }
        }
        let (action, child) = best_action.expect("node with a Some child yields a best action");
        actions.push(action);
        idx = child;
    }
    while actions.len() < horizon {
        let t = actions.len();
        actions.push(action_at(genes, t, &arena[idx].state, policy));
    }

    let conservation_ok = arena.iter().all(|n| {
        let child_sum: u64 = n
            .children
            .iter()
            .flatten()
            .map(|&c| arena[c].visits)
            .sum();
        n.visits == child_sum + n.own_simulations
    });
    let root_child_visits: Vec<u64> = arena[0]
        .children
        .iter()
        .map(|c| c.map_or(0, |i| arena[i].visits))
        .collect();

    // Paired evaluation under identical noise; keep the input when the
    // refined sequence does not measure up.
    let eval_rng = seeding::stream(config.seed, "mcts-eval");
    let mut refined = Chromosome::new(actions);
    let refined_value =
        fitness(&mut refined, cohort, patient_id, discount, 1, &mut eval_rng.clone())?;
    let mut incumbent = Chromosome::new(genes.clone());
    let incumbent_value =
        fitness(&mut incumbent, cohort, patient_id, discount, 1, &mut eval_rng.clone())?;

    let kept_input = refined_value < incumbent_value;
    let (actions, estimate) = if kept_input {
        (incumbent.actions, incumbent_value)
    } else {
        (refined.actions, refined_value)
    };
    Ok(RefineResult {
        actions,
        estimate,
        root_visits: arena[0].visits,
        node_count: arena.len(),
        root_child_visits,
        conservation_ok,
        kept_input,
    })
}

/// Index of the refinement with the highest estimate, ties to the lowest
/// index.
pub fn select_best(results: &[RefineResult]) -> Result<usize> {
    if results.is_empty() {
        return Err(Error::Usage("select_best needs at least one candidate".into()));
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        if r.estimate > results[best].estimate {
            best = i;
        }
    }
    Ok(best)
}

/// Exhaustive optimum over all `n_actions^horizon` open-loop sequences.
/// Meaningful on zero-noise cohorts, where fitness is deterministic.
pub fn brute_force_best(
    cohort: &Cohort,
    patient_id: usize,
    discount: f64,
) -> Result<(Vec<usize>, f64)> {
    let horizon = cohort.config.horizon;
    let n_actions = cohort.config.n_actions;
    let total = (n_actions as u128).pow(horizon as u32);
    if total > 1 << 20 {
        return Err(Error::Usage(format!(
            "brute force over {total} sequences is out of reach"
        )));
    }
    let mut best_actions = Vec::new();
    let mut best_value = f64::NEG_INFINITY;
    let mut actions = vec![0usize; horizon];
    for _ in 0..total {
        let mut c = Chromosome::new(actions.clone());
        let value =
            fitness(&mut c, cohort, patient_id, discount, 1, &mut seeding::stream(0, "bsearch"))?;
        if value > best_value {
            best_value = value;
            best_actions = actions.clone();
        }
        for slot in actions.iter_mut() {
            *slot += 1;
            if *slot < n_actions {
                break;
            }
            *slot = 0;
        }
    }
    Ok((best_actions, best_value))
}
