/* tslint:disable */
/* eslint-disable */

/**
 * One GridHouse episode driven from the page.
 */
export class Episode {
    free(): void;
    [Symbol.dispose](): void;
    admissible(): string;
    constructor();
    objective(): string;
    reset(task_id: string): string;
    /**
     * `{observation, reward, done, steps}` after one action.
     */
    step(action: string): string;
    tasks(): string;
}

/**
 * Per-chain advantages for `rewards`, grouped `group_size` at a time.
 * `reinforce_pp` treats each chain as a single response token.
 */
export function advantages(rewards: string, group_size: number, algorithm: string): string;

/**
 * Token-level mask of a trajectory as JSON: `{segments: [{kind, text,
 * tokens, mask}], masked, total}`.
 */
export function mask_view(text: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_episode_free: (a: number, b: number) => void;
    readonly advantages: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly episode_admissible: (a: number) => [number, number, number, number];
    readonly episode_new: () => number;
    readonly episode_objective: (a: number) => [number, number, number, number];
    readonly episode_reset: (a: number, b: number, c: number) => [number, number, number, number];
    readonly episode_step: (a: number, b: number, c: number) => [number, number, number, number];
    readonly episode_tasks: (a: number) => [number, number];
    readonly mask_view: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
