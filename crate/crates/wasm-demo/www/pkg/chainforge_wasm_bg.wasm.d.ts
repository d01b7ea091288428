/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_episode_free: (a: number, b: number) => void;
export const advantages: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const episode_admissible: (a: number) => [number, number, number, number];
export const episode_new: () => number;
export const episode_objective: (a: number) => [number, number, number, number];
export const episode_reset: (a: number, b: number, c: number) => [number, number, number, number];
export const episode_step: (a: number, b: number, c: number) => [number, number, number, number];
export const episode_tasks: (a: number) => [number, number];
export const mask_view: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
