/* tslint:disable */
/* eslint-disable */

export function bundled_facts(): string;

export function bundled_statutes(): string;

/**
 * Rescales the bundled statute numbers and shows how the numeric
 * fixtures' answers move.
 */
export function perturb_rules(seed: number): string;

/**
 * Full quiz audit on a synthetic bank with a simulated responder.
 */
export function simulate_audit(responder: string, n: number, seed: number): string;

/**
 * Statutes plus facts, then the query. An empty statute text means the
 * bundled statutes, which also brings their computed-predicate blocklist.
 */
export function solve_query(statutes: string, facts: string, query: string, max_depth: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bundled_facts: () => [number, number];
    readonly bundled_statutes: () => [number, number];
    readonly perturb_rules: (a: number) => [number, number];
    readonly simulate_audit: (a: number, b: number, c: number, d: number) => [number, number];
    readonly solve_query: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
